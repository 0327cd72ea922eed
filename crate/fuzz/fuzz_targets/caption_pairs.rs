#![no_main]

use libfuzzer_sys::fuzz_target;
use panogen::io::{parse_pairs, to_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pairs) = parse_pairs(text) {
            let again = parse_pairs(&to_jsonl(&pairs).unwrap()).expect("re-encoded pairs parse");
            assert_eq!(again, pairs);
        }
    }
});
