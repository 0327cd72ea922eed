use rand::Rng;

use super::data::world_train_pairs;
use super::report::{DomainRow, RankRow};
use crate::autodiff::Tensor;
use crate::conditioning::Vocabulary;
use crate::diffusion::{sample, DenoiserConfig, Generator, GeneratorConfig, TrainPair};
use crate::error::{Error, Result};
use crate::lora::{adapt_generator, trainable_count, AdaptationConfig};
use crate::metrics::{feature_stats, frechet_distance, FeatureExtractor};
use crate::rng;
use crate::scene::SceneId;
use crate::world::{make_world, WorldConfig};

/// Sizes and schedules of the two-domain experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainConfig {
    /// Training pairs per domain.
    pub per_domain: usize,
    /// Held-out target images used as the reference set and as the
    /// captions the samples are drawn for.
    pub reference: usize,
    pub denoiser: DenoiserConfig,
    pub base_iters: usize,
    pub base_lr: f64,
    pub adapt_iters: usize,
    pub adapt_lr: f64,
    pub rank: usize,
    pub batch_size: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            per_domain: 256,
            reference: 64,
            denoiser: DenoiserConfig {
                dim: 32,
                ..DenoiserConfig::default()
            },
            base_iters: 600,
            base_lr: 0.05,
            adapt_iters: 300,
            adapt_lr: 0.05,
            rank: 8,
            batch_size: 8,
        }
    }
}

/// Sub-views split by texture: the source domain shows the first four
/// textures, the target domain the other four.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainViews {
    pub source: Vec<TrainPair>,
    pub target: Vec<TrainPair>,
    pub reference: Vec<TrainPair>,
}

fn is_source(vocab: &Vocabulary, caption: &[usize]) -> Result<bool> {
    let label = caption
        .last()
        .and_then(|t| vocab.token(*t))
        .and_then(SceneId::from_label)
        .ok_or_else(|| Error::invalid("caption does not end in a scene label"))?;
    Ok(label.texture().index() < 4)
}

pub fn two_domain_views(seed: u64, cfg: &DomainConfig, vocab: &Vocabulary) -> Result<DomainViews> {
    let mut v = DomainViews {
        source: Vec::new(),
        target: Vec::new(),
        reference: Vec::new(),
    };
    let mut r = rng::stream(seed, "domain.views");
    for i in 0..256u64 {
        let w = make_world(
            rng::stream_seed(seed, &format!("domain.world.{i}")),
            &WorldConfig::default(),
        )?;
        let mut pairs = world_train_pairs(&w, vocab)?;
        use rand::seq::SliceRandom;
        pairs.shuffle(&mut r);
        for p in pairs {
            if is_source(vocab, &p.caption)? {
                if v.source.len() < cfg.per_domain {
                    v.source.push(p);
                }
            } else if v.target.len() < cfg.per_domain {
                v.target.push(p);
            } else if v.reference.len() < cfg.reference {
                v.reference.push(p);
            }
        }
        if v.source.len() == cfg.per_domain && v.target.len() == cfg.per_domain && v.reference.len() == cfg.reference {
            return Ok(v);
        }
    }
    Err(Error::invalid("could not collect enough views for both domains"))
}

fn samples<R: Rng + ?Sized>(gen: &Generator, captions: &[&[usize]], rng: &mut R) -> Result<Vec<Tensor>> {
    let schedule = gen.schedule()?;
    let shape = gen.cfg.denoiser.latent_shape();
    captions
        .iter()
        .map(|c| {
            let cond = gen.condition(c)?;
            let mut img = sample(gen, &schedule, &shape, &cond, rng)?;
            img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Ok(img)
        })
        .collect()
}

fn base_generator(seed: u64, cfg: &DomainConfig, vocab: &Vocabulary, views: &DomainViews) -> Result<Generator> {
    let mut gen = Generator::new(
        GeneratorConfig::new(cfg.denoiser, vocab.len()),
        &mut rng::stream(seed, "domain.init"),
    )?;
    gen.train(
        &views.source,
        cfg.base_iters,
        cfg.batch_size,
        cfg.base_lr,
        &mut rng::stream(seed, "domain.base"),
    )?;
    Ok(gen)
}

fn adapt(
    base: &Generator,
    seed: u64,
    rank: usize,
    cfg: &DomainConfig,
    views: &DomainViews,
) -> Result<(Generator, Vec<f64>)> {
    let mut gen = base.clone();
    let acfg = AdaptationConfig {
        lr: cfg.adapt_lr,
        iterations: cfg.adapt_iters,
        batch_size: cfg.batch_size,
        ..AdaptationConfig::new(rank, Vec::new())
    };
    let trace = adapt_generator(&mut gen, &views.target, &acfg, &mut rng::stream(seed, "domain.adapt"))?;
    Ok((gen, trace))
}

/// Fréchet distance to held-out target images of samples drawn for the
/// same captions from `gen`, with a fixed sampling stream.
fn target_distance(gen: &Generator, seed: u64, views: &DomainViews) -> Result<f64> {
    let fx = FeatureExtractor::standard();
    let captions: Vec<&[usize]> = views.reference.iter().map(|p| p.caption.as_slice()).collect();
    let imgs = samples(gen, &captions, &mut rng::stream(seed, "domain.sample"))?;
    let real: Vec<Tensor> = views.reference.iter().map(|p| p.image.clone()).collect();
    frechet_distance(&feature_stats(&imgs, &fx)?, &feature_stats(&real, &fx)?)
}

/// Trains a base generator on the source domain, adapts a copy to the
/// target domain and measures both against the target reference set.
pub fn domain_gap(seed: u64, cfg: &DomainConfig) -> Result<DomainRow> {
    let vocab = Vocabulary::standard();
    let views = two_domain_views(seed, cfg, &vocab)?;
    let base = base_generator(seed, cfg, &vocab, &views)?;
    let (adapted, _) = adapt(&base, seed, cfg.rank, cfg, &views)?;
    Ok(DomainRow {
        seed,
        base: target_distance(&base, seed, &views)?,
        adapted: target_distance(&adapted, seed, &views)?,
    })
}

/// One adaptation per rank from a shared base generator.
pub fn rank_sweep(seed: u64, ranks: &[usize], cfg: &DomainConfig) -> Result<Vec<RankRow>> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to sweep"));
    }
    let vocab = Vocabulary::standard();
    let views = two_domain_views(seed, cfg, &vocab)?;
    let base = base_generator(seed, cfg, &vocab, &views)?;
    ranks
        .iter()
        .map(|&rank| {
            let (gen, trace) = adapt(&base, seed, rank, cfg, &views)?;
            Ok(RankRow {
                rank,
                trainable: trainable_count(&gen.store),
                initial_loss: trace.first().copied().unwrap_or(f64::NAN),
                final_loss: trace.last().copied().unwrap_or(f64::NAN),
                fid: target_distance(&gen, seed, &views)?,
            })
        })
        .collect()
}
