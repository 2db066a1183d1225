#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence::textgrid::{parse_textgrid, textgrid_to_alignment};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = parse_textgrid(text) {
        if let Ok(words) = textgrid_to_alignment(&grid) {
            for w in words {
                assert!(w.start_s <= w.end_s || w.start_s.is_nan() || w.end_s.is_nan());
            }
        }
    }
});
