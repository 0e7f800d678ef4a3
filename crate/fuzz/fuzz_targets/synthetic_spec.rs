#![no_main]

use dak_core::config::SyntheticSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = text.parse::<SyntheticSpec>() {
        assert_eq!(spec.to_string().parse::<SyntheticSpec>().ok(), Some(spec));
    }
});
