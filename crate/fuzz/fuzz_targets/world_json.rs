#![no_main]

use libfuzzer_sys::fuzz_target;
use panogen::io::parse_world;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = parse_world(text) {
            let _ = file.graph();
        }
    }
});
