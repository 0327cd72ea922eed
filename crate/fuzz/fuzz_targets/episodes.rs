#![no_main]

use libfuzzer_sys::fuzz_target;
use panogen::io::{parse_episodes, to_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(eps) = parse_episodes(text) {
            let again = parse_episodes(&to_jsonl(&eps).unwrap()).expect("re-encoded episodes parse");
            assert_eq!(again, eps);
        }
    }
});
