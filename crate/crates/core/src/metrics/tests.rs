use proptest::prelude::*;
use serde_json::Value;

use super::*;
use crate::scene::SceneId;
use crate::world::{Node, WorldGraph};

fn graph(positions: &[[f64; 3]], edges: Vec<(usize, usize)>) -> WorldGraph {
    let nodes = positions
        .iter()
        .enumerate()
        .map(|(id, p)| Node {
            id,
            pos: *p,
            scene: SceneId(0),
        })
        .collect();
    WorldGraph::new(nodes, edges).unwrap()
}

fn line(n: usize, step: f64) -> WorldGraph {
    let pos: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * step, 0.0, 0.0]).collect();
    graph(&pos, (1..n).map(|i| (i - 1, i)).collect())
}

#[test]
fn three_episode_fixture() {
    let fx: Value = serde_json::from_str(include_str!("../../tests/fixtures/metrics_three_episodes.json")).unwrap();
    let pos: Vec<[f64; 3]> = serde_json::from_value(fx["positions"].clone()).unwrap();
    let edges: Vec<(usize, usize)> = serde_json::from_value(fx["edges"].clone()).unwrap();
    let g = graph(&pos, edges);
    let eps: Vec<(Vec<usize>, Vec<usize>)> = fx["episodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                serde_json::from_value(e["truth"].clone()).unwrap(),
                serde_json::from_value(e["predicted"].clone()).unwrap(),
            )
        })
        .collect();
    let results: Vec<EpisodeResult> = eps
        .iter()
        .map(|(t, p)| EpisodeResult {
            graph: &g,
            predicted: p,
            truth: t,
        })
        .collect();
    let report = evaluate(&results, 3.0).unwrap();
    let ex = &fx["expected"];
    for (key, got) in [
        ("TL", report.tl),
        ("NE", report.ne),
        ("SR", report.sr),
        ("SPL", report.spl),
        ("GP", report.gp),
    ] {
        assert!((got - ex[key].as_f64().unwrap()).abs() < 1e-9, "{key}: {got}");
    }
    assert!((report.sr - 66.67).abs() < 0.005);
    let per: Vec<EpisodeMetrics> = serde_json::from_value(ex["per_episode"].clone()).unwrap();
    for (a, b) in report.episodes.iter().zip(&per) {
        assert_eq!(a.success, b.success);
        for (x, y) in [(a.tl, b.tl), (a.ne, b.ne), (a.spl, b.spl), (a.gp, b.gp)] {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!((goal_progress(&results).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn perfect_and_stationary_agents() {
    let g = line(6, 2.5);
    let truth = [0, 1, 2, 3, 4];
    let perfect = evaluate(
        &[EpisodeResult {
            graph: &g,
            predicted: &truth,
            truth: &truth,
        }],
        3.0,
    )
    .unwrap();
    assert_eq!((perfect.sr, perfect.spl), (100.0, 100.0));
    let still = evaluate(
        &[EpisodeResult {
            graph: &g,
            predicted: &[0],
            truth: &truth,
        }],
        3.0,
    )
    .unwrap();
    assert_eq!((still.sr, still.spl, still.ne, still.gp), (0.0, 0.0, 10.0, 0.0));
}

#[test]
fn goal_progress_cases() {
    let g = line(5, 1.0);
    let reach = [EpisodeResult {
        graph: &g,
        predicted: &[1, 2, 3],
        truth: &[1, 2, 3],
    }];
    assert_eq!(goal_progress(&reach).unwrap(), 2.0);
    let away = [EpisodeResult {
        graph: &g,
        predicted: &[2, 1, 0],
        truth: &[2, 3, 4],
    }];
    assert_eq!(goal_progress(&away).unwrap(), -2.0);
}

#[test]
fn degenerate_start_equals_goal() {
    let g = line(3, 1.0);
    let r = evaluate(
        &[EpisodeResult {
            graph: &g,
            predicted: &[1],
            truth: &[1],
        }],
        3.0,
    )
    .unwrap();
    assert_eq!(r.spl, 100.0);
    assert!(evaluate(&[], 3.0).is_err());
    assert!(evaluate(
        &[EpisodeResult {
            graph: &g,
            predicted: &[0],
            truth: &[1]
        }],
        3.0
    )
    .is_err());
    assert!(evaluate(
        &[EpisodeResult {
            graph: &g,
            predicted: &[1, 9],
            truth: &[1]
        }],
        3.0
    )
    .is_err());
}

#[test]
fn report_serializes_with_fixed_key_order() {
    let g = line(3, 1.0);
    let r = evaluate(
        &[EpisodeResult {
            graph: &g,
            predicted: &[0, 1],
            truth: &[0, 1, 2],
        }],
        3.0,
    )
    .unwrap();
    let s = serde_json::to_string(&r).unwrap();
    let keys = ["\"TL\"", "\"NE\"", "\"SR\"", "\"SPL\"", "\"GP\"", "\"episodes\""];
    let at: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]));
    let back: MetricsReport = serde_json::from_str(&s).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #[test]
    fn report_invariants_hold(seed in 0u64..500, radius in 0.0f64..10.0) {
        let w = crate::world::make_world(seed, &crate::world::WorldConfig { nodes: 8, episodes: 6, ..Default::default() }).unwrap();
        let preds: Vec<Vec<usize>> = w.episodes.iter().enumerate().map(|(i, e)| {
            let mut p = e.path[..1 + i % e.path.len()].to_vec();
            if i % 3 == 0 {
                if let Some(&(n, _)) = w.graph.neighbors(*p.last().unwrap()).first() { p.push(n); }
            }
            p
        }).collect();
        let results: Vec<EpisodeResult> = w.episodes.iter().zip(&preds)
            .map(|(e, p)| EpisodeResult { graph: &w.graph, predicted: p, truth: &e.path }).collect();
        let r = evaluate(&results, radius).unwrap();
        prop_assert!(r.spl <= r.sr + 1e-9);
        let wider = evaluate(&results, radius + 1.0).unwrap();
        prop_assert!(wider.sr >= r.sr);
        let mut rev = results.clone();
        rev.reverse();
        let r2 = evaluate(&rev, radius).unwrap();
        prop_assert!((r2.sr - r.sr).abs() < 1e-9 && (r2.spl - r.spl).abs() < 1e-9 && (r2.tl - r.tl).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_self(seed in 0u64..200) {
        let mut r = crate::rng::from_seed(seed);
        let a: Vec<Vec<f64>> = (0..30).map(|_| crate::rng::normal_vec(&mut r, 4)).collect();
        let b: Vec<Vec<f64>> = (0..30).map(|_| crate::rng::normal_vec(&mut r, 4).iter().map(|v| 2.0 * v + 1.0).collect()).collect();
        let (sa, sb) = (FeatureStats::from_features(&a).unwrap(), FeatureStats::from_features(&b).unwrap());
        prop_assert!(frechet_distance(&sa, &sa).unwrap() <= 1e-8);
        let (ab, ba) = (frechet_distance(&sa, &sb).unwrap(), frechet_distance(&sb, &sa).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-8);
        prop_assert!(ab > 0.0);
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((sa.cov[i * 4 + j] - sa.cov[j * 4 + i]).abs() <= 1e-9);
            }
        }
    }
}

fn diag_stats(mean: Vec<f64>, var: &[f64]) -> FeatureStats {
    let d = var.len();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        cov[i * d + i] = var[i];
    }
    FeatureStats {
        mean,
        cov,
        count: d + 1,
    }
}

#[test]
fn diagonal_closed_form() {
    let mut r = crate::rng::from_seed(4);
    for _ in 0..20 {
        let va: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut r, 0.0..3.0)).collect();
        let vb: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut r, 0.0..3.0)).collect();
        let ma = crate::rng::normal_vec(&mut r, 6);
        let mb = crate::rng::normal_vec(&mut r, 6);
        let expected: f64 = va
            .iter()
            .zip(&vb)
            .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
            .sum::<f64>()
            + ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let got = frechet_distance(&diag_stats(ma, &va), &diag_stats(mb, &vb)).unwrap();
        assert!((got - expected).abs() <= 1e-8, "{got} vs {expected}");
    }
}

#[test]
fn zero_covariances_give_mean_gap() {
    let a = diag_stats(vec![1.0, 2.0], &[0.0, 0.0]);
    let b = diag_stats(vec![0.0, 4.0], &[0.0, 0.0]);
    assert_eq!(frechet_distance(&a, &b).unwrap(), 5.0);
    assert!(frechet_distance(&a, &diag_stats(vec![0.0; 3], &[0.0; 3])).is_err());
}

#[test]
fn feature_statistics() {
    let ex = FeatureExtractor::standard();
    let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut crate::rng::from_seed(1));
    let same = vec![img.clone(); 20];
    let s = feature_stats(&same, &ex).unwrap();
    assert!(s.cov.iter().all(|v| v.abs() < 1e-24));
    assert_eq!(feature_stats(&same, &ex).unwrap(), s);
    assert!(feature_stats(&same[..10], &ex).is_err());

    let mut r = crate::rng::from_seed(2);
    let xs: Vec<Tensor> = (0..40)
        .map(|_| Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut r))
        .collect();
    let all = feature_stats(&xs, &ex).unwrap();
    let (a, b) = (
        feature_stats(&xs[..17], &ex).unwrap(),
        feature_stats(&xs[17..], &ex).unwrap(),
    );
    for i in 0..ex.dim() {
        let pooled = (17.0 * a.mean[i] + 23.0 * b.mean[i]) / 40.0;
        assert!((all.mean[i] - pooled).abs() < 1e-12);
    }
}
