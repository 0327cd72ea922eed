//! Replays the checked-in fuzz seeds through the decoders they target.

use std::fs;
use std::path::{Path, PathBuf};

use panogen::io::{
    decode_checkpoint, decode_panorama, encode_checkpoint, encode_panorama, parse_episodes, parse_metrics, parse_pairs,
    parse_world, to_jsonl, validate_bytes,
};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn checkpoint_seeds_round_trip() {
    for (p, bytes) in seeds("checkpoint") {
        let store = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(encode_checkpoint(&store), bytes, "{}", p.display());
    }
}

#[test]
fn panorama_seeds_round_trip() {
    for (p, bytes) in seeds("panorama") {
        let pano = decode_panorama(&bytes).unwrap();
        assert_eq!(encode_panorama(&pano), bytes, "{}", p.display());
    }
}

#[test]
fn world_seeds_parse() {
    for (_, bytes) in seeds("world_json") {
        parse_world(text(&bytes)).unwrap().graph().unwrap();
    }
}

#[test]
fn record_seeds_round_trip() {
    for (_, bytes) in seeds("episodes") {
        let eps = parse_episodes(text(&bytes)).unwrap();
        assert_eq!(parse_episodes(&to_jsonl(&eps).unwrap()).unwrap(), eps);
    }
    for (_, bytes) in seeds("caption_pairs") {
        let pairs = parse_pairs(text(&bytes)).unwrap();
        assert_eq!(parse_pairs(&to_jsonl(&pairs).unwrap()).unwrap(), pairs);
    }
    for (_, bytes) in seeds("metrics") {
        let m = parse_metrics(text(&bytes)).unwrap();
        assert!(m.spl <= m.sr);
    }
}

#[test]
fn validate_seeds_classify() {
    for (p, bytes) in seeds("validate") {
        let truncated = p.file_name().unwrap().to_str().unwrap().starts_with("truncated");
        assert_eq!(validate_bytes(&bytes).is_err(), truncated, "{}", p.display());
    }
}
