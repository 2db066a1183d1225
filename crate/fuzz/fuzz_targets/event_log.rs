#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence_service::store::parse_events;

fuzz_target!(|data: &[u8]| {
    let _ = parse_events(data);
});
