#![no_main]

use dak_cli::bench::{parse_levels, MAX_BENCH_LEVEL};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((lo, hi)) = parse_levels(text) {
        assert!(1 <= lo && lo <= hi && hi <= MAX_BENCH_LEVEL);
    }
});
