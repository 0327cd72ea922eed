#![no_main]

use libfuzzer_sys::fuzz_target;
use panogen::io::parse_metrics;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_metrics(text) {
            assert!(m.spl <= m.sr + 1e-9);
        }
    }
});
