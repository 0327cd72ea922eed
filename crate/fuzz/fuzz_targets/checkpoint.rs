#![no_main]

use libfuzzer_sys::fuzz_target;
use panogen::io::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&store)).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again), encode_checkpoint(&store));
    }
});
