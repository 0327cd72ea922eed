use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panogen::io::{decode_checkpoint, decode_panorama, encode_panorama, parse_loss_trace, parse_metrics, read_world};
use panogen::pano::{make_mask, partition, MaskSpec, MaskStrategy, Panorama};
use panogen::scene::Texture;

fn panogen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panogen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = panogen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    panogen(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to bytes for every file below `dir`.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn world(dir: &Path, seed: &str, nodes: &str) -> PathBuf {
    let out = dir.join(format!("world_{seed}_{nodes}"));
    ok(&[
        "make-world",
        "--seed",
        seed,
        "--nodes",
        nodes,
        "--episodes",
        "10",
        "--out",
        s(&out),
    ]);
    out
}

fn base_model(dir: &Path, world_dir: &Path) -> (PathBuf, PathBuf) {
    let pairs = world_dir.join("pairs.jsonl");
    ok(&[
        "build-pairs",
        "--world",
        s(&world_dir.join("world.json")),
        "--out",
        s(&pairs),
    ]);
    let model = dir.join("base.ckpt");
    ok(&[
        "train-base",
        "--seed",
        "3",
        "--pairs",
        s(&pairs),
        "--iters",
        "30",
        "--steps",
        "10",
        "--dim",
        "16",
        "--out",
        s(&model),
    ]);
    (pairs, model)
}

#[test]
fn make_world_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["make-world", "--seed", "9", "--nodes", "7", "--out", s(out)]);
    }
    assert_eq!(tree(&a), tree(&b));
    let report = ok(&[
        "validate",
        s(&a.join("world.json")),
        s(&a.join("episodes.jsonl")),
        s(&a.join("panos/node_000.pan")),
    ]);
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().all(|l| l.ends_with(" ok")));
    assert_eq!(read_world(&a.join("world.json"), None).unwrap().graph.len(), 7);
    assert!(!dir.path().join(".a.partial").exists());

    assert_eq!(
        code(&[
            "make-world",
            "--seed",
            "9",
            "--nodes",
            "1",
            "--out",
            s(&dir.path().join("c"))
        ]),
        2
    );
    assert!(!dir.path().join("c").exists());
    assert_eq!(
        code(&["make-world", "--nodes", "4", "--out", s(&dir.path().join("c"))]),
        2
    );
}

#[test]
fn ten_nodes_give_360_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "4", "10");
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["build-pairs", "--world", s(&w.join("world.json")), "--out", s(&a)]);
    ok(&["build-pairs", "--world", s(&w.join("world.json")), "--out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let pairs = panogen::io::parse_pairs(&text).unwrap();
    assert_eq!(pairs.len(), 360);
    assert!(pairs.iter().all(|p| !p.caption.trim().is_empty()));
}

#[test]
fn adapt_traces_and_zero_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "5", "3");
    let (pairs, model) = base_model(dir.path(), &w);
    let zero = dir.path().join("zero.ckpt");
    ok(&[
        "adapt",
        "--seed",
        "1",
        "--model",
        s(&model),
        "--pairs",
        s(&pairs),
        "--iters",
        "0",
        "--rank",
        "4",
        "--out",
        s(&zero),
    ]);
    let store = decode_checkpoint(&std::fs::read(&zero).unwrap()).unwrap();
    let bs: Vec<_> = store.iter().filter(|(n, _)| n.ends_with(".B")).collect();
    assert!(!bs.is_empty());
    assert!(bs.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    assert!(store.iter().all(|(n, _)| n.starts_with("lora.")));
    assert!(
        parse_loss_trace(&std::fs::read_to_string(dir.path().join("zero.trace.jsonl")).unwrap())
            .unwrap()
            .is_empty()
    );

    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "adapt",
            "--seed",
            "2",
            "--model",
            s(&model),
            "--pairs",
            s(&pairs),
            "--iters",
            "7",
            "--rank",
            "4",
            "--out",
            s(&out),
        ]);
        (
            std::fs::read(&out).unwrap(),
            std::fs::read_to_string(out.with_extension("trace.jsonl")).unwrap(),
        )
    };
    let (a, ta) = run("a.ckpt");
    let (b, tb) = run("b.ckpt");
    assert_eq!((a, &ta), (b, &tb));
    assert_eq!(parse_loss_trace(&ta).unwrap().len(), 7);

    let again = dir.path().join("again.ckpt");
    assert_eq!(
        code(&[
            "adapt",
            "--seed",
            "1",
            "--model",
            s(&model),
            "--pairs",
            s(&pairs),
            "--rank",
            "0",
            "--out",
            s(&again)
        ]),
        2
    );
}

#[test]
fn adaptation_lowers_the_loss_over_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "6", "4");
    let (pairs, model) = base_model(dir.path(), &w);
    let mut drops = Vec::new();
    for seed in ["1", "2", "3"] {
        let out = dir.path().join(format!("ad{seed}.ckpt"));
        ok(&[
            "adapt",
            "--seed",
            seed,
            "--model",
            s(&model),
            "--pairs",
            s(&pairs),
            "--iters",
            "200",
            "--rank",
            "4",
            "--lr",
            "0.05",
            "--out",
            s(&out),
        ]);
        let trace = parse_loss_trace(&std::fs::read_to_string(out.with_extension("trace.jsonl")).unwrap()).unwrap();
        let mean = |r: &[panogen::agent::LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        drops.push(mean(&trace[..20]) - mean(&trace[trace.len() - 20..]));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn generation_modes() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "7", "3");
    let (pairs, model) = base_model(dir.path(), &w);
    let adapter = dir.path().join("ad.ckpt");
    ok(&[
        "adapt",
        "--seed",
        "1",
        "--model",
        s(&model),
        "--pairs",
        s(&pairs),
        "--iters",
        "3",
        "--rank",
        "4",
        "--out",
        s(&adapter),
    ]);
    let world_json = w.join("world.json");

    let inp = dir.path().join("inp");
    let inp2 = dir.path().join("inp2");
    for out in [&inp, &inp2] {
        ok(&[
            "generate",
            "--seed",
            "4",
            "--mode",
            "inpaint",
            "--mask",
            "prm",
            "--model",
            s(&model),
            "--adapter",
            s(&adapter),
            "--world",
            s(&world_json),
            "--out",
            s(out),
        ]);
    }
    assert_eq!(tree(&inp), tree(&inp2));
    let mask = make_mask(8, 8, &MaskSpec::new(MaskStrategy::Prm, 0)).unwrap();
    for n in 0..3 {
        let name = format!("node_{n:03}.pan");
        let src = decode_panorama(&std::fs::read(w.join("panos").join(&name)).unwrap()).unwrap();
        let gen = decode_panorama(&std::fs::read(inp.join("panos").join(&name)).unwrap()).unwrap();
        let mut changed = false;
        for (a, b) in partition(&src).unwrap().iter().zip(partition(&gen).unwrap()) {
            for (i, masked) in mask.data().iter().enumerate() {
                let (pa, pb) = (&a.image.data()[i * 3..i * 3 + 3], &b.image.data()[i * 3..i * 3 + 3]);
                if *masked {
                    changed |= pa != pb;
                } else {
                    assert_eq!(pa, pb);
                }
            }
        }
        assert!(changed);
    }

    let outp = dir.path().join("outp");
    ok(&[
        "generate",
        "--seed",
        "4",
        "--mode",
        "outpaint",
        "--model",
        s(&model),
        "--world",
        s(&world_json),
        "--out",
        s(&outp),
    ]);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(outp.join("generation.json")).unwrap()).unwrap();
    assert_eq!(summary["coverage"], 1.0);
    let windows = panogen::pano::outpaint_schedule(96, 24, 8).unwrap();
    assert_eq!(summary["windows"], windows.len());
    for i in 1..windows.len() {
        let parent = windows.placements[i].parent.unwrap();
        assert_eq!(windows.overlap(i, parent), 32);
    }
    let p = decode_panorama(&std::fs::read(outp.join("panos/node_000.pan")).unwrap()).unwrap();
    assert_eq!((p.width(), p.height(), p.channels()), (96, 24, 3));

    let missing = dir.path().join("missing");
    assert_eq!(
        code(&[
            "generate",
            "--seed",
            "4",
            "--mode",
            "inpaint",
            "--model",
            s(&model),
            "--world",
            s(&world_json),
            "--out",
            s(&missing)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "generate",
            "--seed",
            "4",
            "--mode",
            "inpaint",
            "--mask",
            "abc",
            "--model",
            s(&model),
            "--world",
            s(&world_json),
            "--out",
            s(&missing)
        ]),
        2
    );
}

#[test]
fn agent_training_and_mixing() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "8", "5");
    let held = world(dir.path(), "18", "5");
    let (_, model) = base_model(dir.path(), &w);
    let world_json = w.join("world.json");
    let gen = dir.path().join("gen");
    ok(&[
        "generate",
        "--seed",
        "1",
        "--mode",
        "inpaint",
        "--mask",
        "prm",
        "--model",
        s(&model),
        "--world",
        s(&world_json),
        "--out",
        s(&gen),
    ]);

    let pre = dir.path().join("pre.ckpt");
    let pre2 = dir.path().join("pre2.ckpt");
    for out in [&pre, &pre2] {
        ok(&[
            "pretrain",
            "--seed",
            "1",
            "--world",
            s(&world_json),
            "--iters",
            "15",
            "--out",
            s(out),
            "--trace",
            &format!("{}.jsonl", s(out)),
        ]);
    }
    assert_eq!(std::fs::read(&pre).unwrap(), std::fs::read(&pre2).unwrap());
    let trace = parse_loss_trace(&std::fs::read_to_string(format!("{}.jsonl", s(&pre))).unwrap()).unwrap();
    assert_eq!(trace.len(), 15);
    assert!(trace
        .iter()
        .all(|r| r.parts.contains_key("mlm") && r.parts.contains_key("sap")));

    let ft = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "finetune",
            "--seed",
            "2",
            "--agent",
            s(&pre),
            "--world",
            s(&world_json),
            "--iters",
            "10",
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        std::fs::read(&out).unwrap()
    };
    let baseline = ft("base.ckpt", &[]);
    let zero = ft("zero.ckpt", &["--gen-dir", s(&gen), "--mix-ratio", "0"]);
    assert_eq!(baseline, zero);
    let half = ft("half.ckpt", &["--gen-dir", s(&gen), "--mix-ratio", "0.5"]);
    assert_ne!(baseline, half);
    assert_eq!(half, ft("half2.ckpt", &["--gen-dir", s(&gen), "--mix-ratio", "0.5"]));

    let bad = dir.path().join("bad.ckpt");
    assert_eq!(
        code(&[
            "finetune",
            "--seed",
            "2",
            "--agent",
            s(&pre),
            "--world",
            s(&world_json),
            "--mix-ratio",
            "1.3",
            "--out",
            s(&bad)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "finetune",
            "--seed",
            "2",
            "--agent",
            s(&pre),
            "--world",
            s(&world_json),
            "--mix-ratio",
            "0.5",
            "--out",
            s(&bad)
        ]),
        2
    );

    let report = dir.path().join("sweep.json");
    ok(&[
        "finetune",
        "--seed",
        "2",
        "--agent",
        s(&pre),
        "--world",
        s(&world_json),
        "--gen-dir",
        s(&gen),
        "--iters",
        "5",
        "--sweep-ratios",
        "0,0.1,0.3,0.5,0.7",
        "--sweep-seeds",
        "1,2",
        "--eval-world",
        s(&held.join("world.json")),
        "--out",
        s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    match panogen::experiments::validate_report(&text).unwrap() {
        panogen::experiments::Report::MixRatio { seeds, rows } => {
            assert_eq!(seeds, vec![1, 2]);
            assert_eq!(
                rows.iter().map(|r| r.ratio).collect::<Vec<_>>(),
                vec![0.0, 0.1, 0.3, 0.5, 0.7]
            );
            assert!(rows.iter().all(|r| r.sr.len() == 2));
        }
        other => panic!("unexpected report {other:?}"),
    }
    assert!(ok(&["validate", s(&report)]).contains("report ok"));
}

#[test]
fn reference_policies() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "11", "12");
    let world_json = w.join("world.json");
    let oracle = dir.path().join("oracle.json");
    ok(&[
        "eval",
        "--world",
        s(&world_json),
        "--policy",
        "oracle",
        "--out",
        s(&oracle),
    ]);
    let m = parse_metrics(&std::fs::read_to_string(&oracle).unwrap()).unwrap();
    assert_eq!(m.sr, 100.0);
    assert!((m.spl - 100.0).abs() < 1e-9);
    assert!(ok(&["validate", s(&oracle)]).contains("metrics ok"));

    let still = dir.path().join("still.json");
    ok(&[
        "eval",
        "--world",
        s(&world_json),
        "--policy",
        "stationary",
        "--threads",
        "3",
        "--out",
        s(&still),
    ]);
    let m = parse_metrics(&std::fs::read_to_string(&still).unwrap()).unwrap();
    let world = read_world(&world_json, None).unwrap();
    let near = world
        .episodes
        .iter()
        .filter(|e| world.graph.geodesic(e.start(), e.goal()).unwrap() <= 3.0)
        .count();
    assert!((m.sr - 100.0 * near as f64 / world.episodes.len() as f64).abs() < 1e-9);

    let subset = dir.path().join("subset.jsonl");
    let lines: Vec<&str> = std::fs::read_to_string(w.join("episodes.jsonl"))
        .unwrap()
        .leak()
        .lines()
        .take(2)
        .collect();
    std::fs::write(&subset, lines.join("\n") + "\n").unwrap();
    let sub = dir.path().join("sub.json");
    ok(&[
        "eval",
        "--world",
        s(&world_json),
        "--episodes",
        s(&subset),
        "--policy",
        "oracle",
        "--out",
        s(&sub),
    ]);
    assert_eq!(
        parse_metrics(&std::fs::read_to_string(&sub).unwrap())
            .unwrap()
            .episodes
            .len(),
        2
    );

    assert_eq!(code(&["eval", "--world", s(&world_json), "--out", s(&sub)]), 2);
    std::fs::write(&subset, "{\"path\": [0, 99], \"instruction\": [\"stop\"]}\n").unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--world",
            s(&world_json),
            "--episodes",
            s(&subset),
            "--policy",
            "oracle",
            "--out",
            s(&sub)
        ]),
        3
    );
}

fn texture_set(dir: &Path, textures: std::ops::Range<usize>) {
    std::fs::create_dir_all(dir).unwrap();
    for t in textures.clone() {
        for shift in 0..3 {
            let mut p = Panorama::zeros(96, 24, 3).unwrap();
            let tex = Texture::from_index(t);
            for y in 0..24 {
                for x in 0..96 {
                    for c in 0..3 {
                        let tint = 0.4 + 0.2 * ((c + shift) % 3) as f64;
                        p.pixels_mut()[(y * 96 + x) * 3 + c] = tint * tex.pattern(x + shift, y);
                    }
                }
            }
            std::fs::write(dir.join(format!("t{t}_{shift}.pan")), encode_panorama(&p)).unwrap();
        }
    }
}

#[test]
fn frechet_between_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    texture_set(&a, 0..4);
    texture_set(&b, 4..8);
    let fid = |x: &Path, y: &Path| {
        ok(&["fid", "--set-a", s(x), "--set-b", s(y)])
            .trim()
            .parse::<f64>()
            .unwrap()
    };
    assert!(fid(&a, &a) <= 1e-8);
    let (ab, ba) = (fid(&a, &b), fid(&b, &a));
    assert!(ab > 0.0);
    assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0), "{ab} vs {ba}");

    let out = dir.path().join("fid.json");
    ok(&["fid", "--set-a", s(&a), "--set-b", s(&b), "--out", s(&out)]);
    assert!(ok(&["validate", s(&out)]).contains("frechet ok"));
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["fid", "--set-a", s(&a), "--set-b", s(&empty)]), 3);
}

#[test]
fn validate_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "12", "3");
    let pano = w.join("panos/node_001.pan");
    let mut bytes = std::fs::read(&pano).unwrap();
    bytes.truncate(bytes.len() - 5);
    let broken = dir.path().join("broken.pan");
    std::fs::write(&broken, bytes).unwrap();
    let out = panogen(&["validate", s(&w.join("world.json")), s(&broken)]);
    assert_eq!(out.status.code(), Some(3));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("world ok") && text.contains("invalid"));
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"unknown\": 1}").unwrap();
    assert_eq!(code(&["validate", s(&junk)]), 3);
    assert_eq!(code(&["validate", s(&dir.path().join("nope"))]), 3);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(dir.path(), "13", "3");
    let pairs = w.join("pairs.jsonl");
    ok(&["build-pairs", "--world", s(&w.join("world.json")), "--out", s(&pairs)]);
    let out = dir.path().join("nan.ckpt");
    assert_eq!(
        code(&[
            "train-base",
            "--seed",
            "1",
            "--pairs",
            s(&pairs),
            "--iters",
            "50",
            "--lr",
            "1e12",
            "--steps",
            "10",
            "--dim",
            "16",
            "--out",
            s(&out)
        ]),
        4
    );
    assert!(!out.exists());
}
