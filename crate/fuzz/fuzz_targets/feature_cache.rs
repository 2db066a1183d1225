#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence::features::{decode_cached, encode_cached};

fuzz_target!(|data: &[u8]| {
    if let Ok(mel) = decode_cached(data) {
        assert_eq!(decode_cached(&encode_cached(&mel)).unwrap(), mel);
    }
});
