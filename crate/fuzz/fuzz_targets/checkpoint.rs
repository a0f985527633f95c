#![no_main]
use libfuzzer_sys::fuzz_target;

use varscan::checkpoint::{decode_checkpoint, decode_records, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let _ = decode_records(data);
    if let Ok(state) = decode_checkpoint(data) {
        // accepted input must survive a re-encode unchanged
        let bytes = encode_checkpoint(&state);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);
    }
});
