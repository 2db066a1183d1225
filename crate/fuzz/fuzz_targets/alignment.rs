#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence::corpus::{parse_alignment, spans_from_alignment};

fuzz_target!(|data: &[u8]| {
    if let Ok(words) = parse_alignment(data) {
        if let Ok(spans) = spans_from_alignment("fuzz", &words, 16_000, 500) {
            for s in spans {
                assert!(s.start_frame < s.end_frame && s.end_frame <= 500);
            }
        }
    }
});
