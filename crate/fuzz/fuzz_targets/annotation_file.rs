#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence::annotations::{aggregate_all, parse_annotation_file};

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = parse_annotation_file(data) {
        if let Ok(targets) = aggregate_all(&file.records()) {
            for t in targets {
                assert!(t.prominence.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
});
