use std::cell::RefCell;

use rand::Rng;

use super::*;
use crate::autodiff::{value_and_grad, Binding, Tensor, Var};
use crate::conditioning::TokenId;
use crate::pano::{make_mask, Mask, MaskSpec, MaskStrategy};
use crate::rng::{self, StreamRng};
use crate::testutil::check_store_gradients;

struct Zero;

impl EpsModel for Zero {
    fn predict_eps(&self, z_t: &Tensor, _t: usize, _cond: &[f64]) -> crate::Result<Tensor> {
        Ok(Tensor::zeros(z_t.shape()))
    }
}

impl TapeEps for Zero {
    fn eps_on_tape<'t>(&self, b: &Binding<'t>, z_t: &Tensor, _t: usize, _c: &[TokenId]) -> crate::Result<Var<'t>> {
        Ok(b.constant(Tensor::zeros(z_t.shape())))
    }
}

/// Returns a fixed noise tensor whatever it is asked.
struct Fixed(Tensor);

impl EpsModel for Fixed {
    fn predict_eps(&self, _z: &Tensor, _t: usize, _c: &[f64]) -> crate::Result<Tensor> {
        Ok(self.0.clone())
    }
}

/// Replays the loss's own random draws to return the true noise.
struct Replay(RefCell<StreamRng>, usize);

impl TapeEps for Replay {
    fn eps_on_tape<'t>(&self, b: &Binding<'t>, z_t: &Tensor, _t: usize, _c: &[TokenId]) -> crate::Result<Var<'t>> {
        let mut r = self.0.borrow_mut();
        let _t: usize = r.random_range(0..self.1);
        let eps = rng::normal_vec(&mut *r, z_t.numel());
        Ok(b.constant(Tensor::new(z_t.shape().to_vec(), eps)?))
    }
}

fn small_generator(seed: u64) -> Generator {
    let den = DenoiserConfig {
        height: 4,
        width: 4,
        channels: 2,
        patch: 2,
        dim: 6,
        blocks: 1,
        ff_mult: 2,
        cond_dim: 3,
        steps: 10,
    };
    let mut cfg = GeneratorConfig::new(den, 6);
    cfg.text.embed_dim = 3;
    Generator::new(cfg, &mut rng::from_seed(seed)).unwrap()
}

fn stripes(h: usize, w: usize, c: usize) -> Tensor {
    let data = (0..h * w * c)
        .map(|i| if (i / c % w) % 2 == 0 { 0.9 } else { 0.1 })
        .collect();
    Tensor::new(vec![h, w, c], data).unwrap()
}

#[test]
fn single_step_inversion_with_true_noise() {
    let s = make_schedule(1, 0.3, 0.3).unwrap();
    let mut r = rng::from_seed(5);
    let z0 = Tensor::randn(&[3, 2, 2], 1.0, &mut r);
    let eps = Tensor::randn(&[3, 2, 2], 1.0, &mut r);
    let z1 = forward_noise(&z0, 0, &eps, &s).unwrap().z_t;
    let out = run_from(&Fixed(eps), &s, z1.into_data(), &[3, 2, 2], &[], &mut r).unwrap();
    for (a, b) in out.data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn zero_model_single_step_is_affine() {
    let s = make_schedule(1, 0.2, 0.2).unwrap();
    let z = Tensor::randn(&[2, 2, 1], 1.0, &mut rng::from_seed(1));
    let out = run_from(&Zero, &s, z.data().to_vec(), &[2, 2, 1], &[], &mut rng::from_seed(2)).unwrap();
    for (a, b) in out.data().iter().zip(z.data()) {
        assert!((a - b / 0.8f64.sqrt()).abs() < 1e-12);
    }
    let again = run_from(&Zero, &s, z.data().to_vec(), &[2, 2, 1], &[], &mut rng::from_seed(3)).unwrap();
    assert_eq!(out, again);
}

#[test]
fn sample_shape_follows_request() {
    let s = make_schedule(3, 0.1, 0.2).unwrap();
    for shape in [[1, 1, 1], [2, 5, 3], [7, 3, 1]] {
        let out = sample(&Zero, &s, &shape, &[], &mut rng::from_seed(0)).unwrap();
        assert_eq!(out.shape(), shape);
    }
    assert!(sample(&Zero, &s, &[0, 2, 1], &[], &mut rng::from_seed(0)).is_err());
}

#[test]
fn clear_mask_returns_source() {
    let s = NoiseSchedule::default_linear();
    let src = Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut rng::from_seed(3));
    let out = inpaint_sample(&Zero, &s, &src, &Mask::filled(4, 4, false), &[], &mut rng::from_seed(4)).unwrap();
    assert_eq!(out, src);
}

#[test]
fn full_mask_matches_plain_sampling() {
    let g = small_generator(1);
    let s = g.schedule().unwrap();
    let cond = vec![0.3, -0.2, 0.1];
    let src = Tensor::uniform(&[4, 4, 2], 0.0, 1.0, &mut rng::from_seed(3));
    let a = inpaint_sample(&g, &s, &src, &Mask::filled(4, 4, true), &cond, &mut rng::from_seed(9)).unwrap();
    let b = sample(&g, &s, &[4, 4, 2], &cond, &mut rng::from_seed(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inpainting_preserves_the_known_region() {
    let g = Generator::new(
        GeneratorConfig::new(DenoiserConfig::default(), 40),
        &mut rng::from_seed(2),
    )
    .unwrap();
    let s = g.schedule().unwrap();
    let src = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng::from_seed(3));
    let mask = make_mask(8, 8, &MaskSpec::new(MaskStrategy::Prm, 0).with_crop(2)).unwrap();
    let cond = g.condition(&[1, 2, 3]).unwrap();
    let out = inpaint_sample(&g, &s, &src, &mask, &cond, &mut rng::from_seed(4)).unwrap();
    for y in 3..5 {
        for x in 3..5 {
            for c in 0..3 {
                let i = (y * 8 + x) * 3 + c;
                assert_eq!(out.data()[i].to_bits(), src.data()[i].to_bits());
            }
        }
    }
    let changed = (0..64)
        .filter(|p| mask.data()[*p] && out.data()[p * 3] != src.data()[p * 3])
        .count();
    assert_eq!(changed, 60);
    for seed in 0..5 {
        let m = make_mask(8, 8, &MaskSpec::new(MaskStrategy::Srm, seed)).unwrap();
        let out = inpaint_sample(&g, &s, &src, &m, &cond, &mut rng::from_seed(seed)).unwrap();
        for p in (0..64).filter(|p| !m.data()[*p]) {
            assert_eq!(&out.data()[p * 3..p * 3 + 3], &src.data()[p * 3..p * 3 + 3]);
        }
    }
}

#[test]
fn inpaint_rejects_mismatched_mask() {
    let s = NoiseSchedule::default_linear();
    let src = Tensor::zeros(&[4, 4, 1]);
    assert!(inpaint_sample(&Zero, &s, &src, &Mask::filled(4, 3, true), &[], &mut rng::from_seed(0)).is_err());
}

fn pairs(n: usize) -> Vec<TrainPair> {
    (0..n)
        .map(|i| TrainPair {
            image: Tensor::uniform(&[4, 4, 2], 0.0, 1.0, &mut rng::from_seed(i as u64)),
            caption: vec![1 + i % 4, 2],
        })
        .collect()
}

#[test]
fn oracle_stub_has_zero_loss() {
    let s = make_schedule(10, 0.01, 0.2).unwrap();
    let data = pairs(1);
    let store = crate::autodiff::ParamStore::new();
    let stub = Replay(RefCell::new(rng::from_seed(8)), 10);
    let (loss, _) = value_and_grad(&store, |b| {
        denoise_loss(&stub, LatentCodec::Identity, b, &[&data[0]], &s, &mut rng::from_seed(8))
    })
    .unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn zero_model_loss_is_about_one() {
    let s = NoiseSchedule::default_linear();
    let data = pairs(1);
    let batch: Vec<&TrainPair> = std::iter::repeat_n(&data[0], 400).collect();
    let store = crate::autodiff::ParamStore::new();
    let (loss, _) = value_and_grad(&store, |b| {
        denoise_loss(&Zero, LatentCodec::Identity, b, &batch, &s, &mut rng::from_seed(1))
    })
    .unwrap();
    assert!((loss - 1.0).abs() < 0.05, "{loss}");
}

#[test]
fn empty_batch_is_rejected() {
    let s = NoiseSchedule::default_linear();
    let store = crate::autodiff::ParamStore::new();
    let r = value_and_grad(&store, |b| {
        denoise_loss(&Zero, LatentCodec::Identity, b, &[], &s, &mut rng::from_seed(1))
    });
    assert!(r.is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let g = small_generator(3);
    let s = g.schedule().unwrap();
    let data = pairs(1);
    let worst = check_store_gradients(&g.store, |b| {
        denoise_loss(&g, LatentCodec::Identity, b, &[&data[0]], &s, &mut rng::from_seed(21))
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn adapted_loss_gradients_match_finite_differences() {
    let mut g = small_generator(4);
    let targets = g.adapter_targets();
    crate::lora::attach(&mut g.store, 2, 2.0, &targets, &mut rng::from_seed(5)).unwrap();
    // nonzero B so that gradients reach A as well
    for t in &targets {
        let b = g.store.get_mut(&crate::lora::b_name(t)).unwrap();
        *b = Tensor::uniform(b.shape(), -0.3, 0.3, &mut rng::from_seed(6));
    }
    let s = g.schedule().unwrap();
    let data = pairs(1);
    let worst = check_store_gradients(&g.store, |b| {
        denoise_loss(&g, LatentCodec::Identity, b, &[&data[0]], &s, &mut rng::from_seed(22))
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn training_halves_the_loss_on_one_texture() {
    let mut g = Generator::new(
        GeneratorConfig::new(DenoiserConfig::default(), 40),
        &mut rng::from_seed(7),
    )
    .unwrap();
    let data = vec![TrainPair {
        image: stripes(8, 8, 3),
        caption: vec![1, 2, 3],
    }];
    let mut r = rng::from_seed(8);
    let trace = g.train(&data, 500, 8, 0.05, &mut r).unwrap();
    let head = trace[0];
    let tail = trace[trace.len() - 25..].iter().sum::<f64>() / 25.0;
    assert!(tail <= 0.5 * head, "{head} -> {tail}");
}

#[test]
fn config_metadata_round_trip() {
    let cfg = GeneratorConfig::new(DenoiserConfig::default(), 37);
    assert_eq!(GeneratorConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
    let mut bad = cfg.to_meta();
    bad[3] = 3.0;
    assert!(GeneratorConfig::from_meta(&bad).is_err());
    assert!(GeneratorConfig::from_meta(&bad[..5]).is_err());
}

#[test]
fn patchify_round_trip() {
    let d = DenoiserConfig::default();
    let z: Vec<f64> = (0..192).map(|i| i as f64).collect();
    let p = d.patchify(&z);
    assert_eq!(&p[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(&p[6..9], &[24.0, 25.0, 26.0]);
    assert_eq!(d.unpatchify(&p), z);
}

#[test]
fn codec_round_trip() {
    let x = Tensor::uniform(&[3, 3, 3], 0.0, 1.0, &mut rng::from_seed(1));
    let c = LatentCodec::Identity;
    assert_eq!(c.decode(&c.encode(&x)), x);
}
