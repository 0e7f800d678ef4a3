#![no_main]

use dak_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        // Anything accepted must survive a round trip.
        let again = ExperimentConfig::parse(&cfg.to_string()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
