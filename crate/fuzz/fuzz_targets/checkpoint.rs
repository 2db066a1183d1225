#![no_main]

use libfuzzer_sys::fuzz_target;
use prominence::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(checkpoint) = Checkpoint::decode(data) {
        // Anything that decodes must encode back to a decodable archive.
        let again = Checkpoint::decode(&checkpoint.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.step, checkpoint.step);
    }
});
