#![no_main]

use libfuzzer_sys::fuzz_target;
use panogen::io::{decode_panorama, encode_panorama};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_panorama(data) {
        assert_eq!(encode_panorama(&p), data);
    }
});
