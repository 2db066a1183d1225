#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence::annotations::read_targets_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_targets_csv(data);
});
