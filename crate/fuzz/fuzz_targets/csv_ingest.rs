#![no_main]

use dak_core::data::{TabularDataset, TaskKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let task = match data.first() {
        Some(b) if b & 1 == 1 => TaskKind::Classification,
        _ => TaskKind::Regression,
    };
    let body = data.get(1..).unwrap_or_default();
    if let Ok((ds, report)) = TabularDataset::from_csv(body, task) {
        assert_eq!(ds.len(), report.rows);
        assert!(ds.x.all_finite());
        let mut out = Vec::new();
        ds.write_csv(&mut out).expect("write to memory");
        let (back, _) = TabularDataset::from_csv(out.as_slice(), task).expect("own output parses");
        assert_eq!(back.len(), ds.len());
    }
});
