use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{mlm, mrm, pid, sap, scene_targets};
use super::{AgentModel, Env, Session};
use crate::autodiff::{value_and_grad, Tensor, Var};
use crate::conditioning::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::world::{mix_environment, MixPolicy, MixScope, Observation, World};

/// Loss weights, learning rates and schedule for both training phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_mlm: f64,
    pub lambda_mrm: f64,
    pub lambda_sap: f64,
    /// Weight of the single-action term in the fine-tuning loss.
    pub lambda_ft: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub iters_pretrain: usize,
    pub iters_finetune: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// 0 means greedy policy paths for the demonstrator loss.
    pub temperature: f64,
    /// Share of trajectory observations replaced by generated ones.
    pub mix_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mlm: 1.0,
            lambda_mrm: 1.0,
            lambda_sap: 1.0,
            lambda_ft: 0.2,
            lr_pretrain: 0.02,
            lr_finetune: 0.01,
            iters_pretrain: 300,
            iters_finetune: 300,
            batch_size: 4,
            max_steps: super::DEFAULT_MAX_STEPS,
            temperature: 0.0,
            mix_ratio: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_mlm,
            self.lambda_mrm,
            self.lambda_sap,
            self.lambda_ft,
            self.lr_pretrain,
            self.lr_finetune,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "loss weights and learning rates must be finite and non-negative",
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::invalid("temperature must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        MixPolicy::new(self.mix_ratio, MixScope::Finetune, 0)?;
        Ok(())
    }
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
}

/// A training world with its tokenized episodes, original observations
/// and optionally a generated counterpart for every node.
#[derive(Clone, Debug)]
pub struct TrainWorld<'a> {
    pub world: &'a World,
    pub original: Vec<Observation>,
    pub generated: Option<Vec<Observation>>,
    pub tokens: Vec<Vec<TokenId>>,
}

impl<'a> TrainWorld<'a> {
    pub fn new(world: &'a World, generated: Option<Vec<Observation>>, vocab: &Vocabulary) -> Result<Self> {
        if let Some(g) = &generated {
            if g.len() != world.graph.len() || g.iter().enumerate().any(|(i, o)| o.node != i) {
                return Err(Error::invalid("need one generated observation per node"));
            }
        }
        let tokens = world
            .episodes
            .iter()
            .map(|e| vocab.encode(&e.instruction))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainWorld {
            world,
            original: world.observations()?,
            generated,
            tokens,
        })
    }

    /// Observations of `path` mixed with generated ones at `ratio`.
    pub(crate) fn mixed(&self, path: &[usize], ratio: f64, scope: MixScope, seed: u64) -> Result<Vec<Observation>> {
        if ratio == 0.0 {
            return Ok(Vec::new());
        }
        let generated = self
            .generated
            .as_ref()
            .ok_or_else(|| Error::invalid("mixing requested but no generated observations are available"))?;
        let traj: Vec<Observation> = path.iter().map(|n| self.original[*n].clone()).collect();
        let policy = MixPolicy::new(ratio, scope, seed)?;
        let mixed = mix_environment(&traj, |n| generated.get(n).cloned(), &policy)?;
        Ok(mixed.into_iter().filter(|o| o.is_generated()).collect())
    }
}

fn pick<'w, R: Rng + ?Sized>(worlds: &'w [TrainWorld<'w>], r: &mut R) -> Result<(usize, usize)> {
    let w = r.random_range(0..worlds.len());
    let n = worlds[w].world.episodes.len();
    if n == 0 {
        return Err(Error::invalid(format!("training world {w} has no episodes")));
    }
    Ok((w, r.random_range(0..n)))
}

fn check_corpus(worlds: &[TrainWorld]) -> Result<()> {
    if worlds.is_empty() || worlds.iter().all(|w| w.world.episodes.is_empty()) {
        return Err(Error::invalid("training corpus is empty"));
    }
    Ok(())
}

fn numeric(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numeric(format!("non-finite {op} at iteration {iter}")),
        other => other,
    }
}

fn weighted<'t>(parts: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (w, v) in parts {
        let term = v.scale(*w)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no loss terms"))
}

/// `λ1·MLM + λ2·MRM + λ3·SAP` averaged over a batch of episodes, with
/// generated observations mixed in at `cfg.mix_ratio` where available.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut AgentModel,
    worlds: &[TrainWorld],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_corpus(worlds)?;
    let mask_id = vocab.mask_id();
    let mut trace = Vec::with_capacity(cfg.iters_pretrain);
    for iter in 0..cfg.iters_pretrain {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (w, e) = pick(worlds, rng)?;
            let tw = &worlds[w];
            let path = &tw.world.episodes[e].path;
            let ratio = if tw.generated.is_some() { cfg.mix_ratio } else { 0.0 };
            let seed = rng.random::<u64>();
            let overrides = tw.mixed(path, ratio, MixScope::Pretrain, seed)?;
            let region = path[rng.random_range(0..path.len())];
            draws.push((w, e, overrides, region, rng.random::<u64>()));
        }
        let envs = draws
            .iter()
            .map(|(w, _, o, _, _)| Env::new(&worlds[*w].world.graph, &worlds[*w].original)?.with_overrides(o))
            .collect::<Result<Vec<_>>>()?;
        let targets = draws
            .iter()
            .map(|(w, _, _, n, _)| scene_targets(&worlds[*w].world.graph, *n, model.cfg.classes))
            .collect::<Result<Vec<Tensor>>>()?;
        let parts = std::cell::RefCell::new([0.0; 3]);
        let (loss, grads) = value_and_grad(&model.store, |b| {
            let s = Session::new(b, model);
            let mut terms = Vec::new();
            let k = 1.0 / cfg.batch_size as f64;
            for (i, (w, e, _, region, seed)) in draws.iter().enumerate() {
                let tw = &worlds[*w];
                let path = &tw.world.episodes[*e].path;
                let tokens = &tw.tokens[*e];
                let mut r = crate::rng::from_seed(*seed);
                let l_mlm = mlm(&s, &envs[i], i, tokens, mask_id, path, &mut r)?;
                let l_mrm = mrm(&s, &envs[i].obs[*region].views, &targets[i], &mut r)?;
                let l_sap = sap(&s, &envs[i], i, tokens, path)?;
                let mut p = parts.borrow_mut();
                p[0] += k * l_mlm.item();
                p[1] += k * l_mrm.item();
                p[2] += k * l_sap.item();
                terms.push((k * cfg.lambda_mlm, l_mlm));
                terms.push((k * cfg.lambda_mrm, l_mrm));
                terms.push((k * cfg.lambda_sap, l_sap));
            }
            weighted(&terms)
        })
        .map_err(|e| numeric(e, iter))?;
        model.store.sgd_step(&grads, cfg.lr_pretrain)?;
        let p = parts.into_inner();
        trace.push(LossRecord {
            iter,
            loss,
            parts: [("mlm", p[0]), ("mrm", p[1]), ("sap", p[2])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        });
    }
    Ok(trace)
}

/// `λ·SAP + PID` averaged over a batch. Each episode's trajectory
/// observations are mixed with generated ones at `cfg.mix_ratio` using a
/// fresh seed, so the replaced set changes every time an episode is drawn.
pub fn finetune<R: Rng + ?Sized>(
    model: &mut AgentModel,
    worlds: &[TrainWorld],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_corpus(worlds)?;
    let mut trace = Vec::with_capacity(cfg.iters_finetune);
    for iter in 0..cfg.iters_finetune {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (w, e) = pick(worlds, rng)?;
            let seed = rng.random::<u64>();
            let overrides = worlds[w].mixed(
                &worlds[w].world.episodes[e].path,
                cfg.mix_ratio,
                MixScope::Finetune,
                seed,
            )?;
            draws.push((w, e, overrides, rng.random::<u64>()));
        }
        let envs = draws
            .iter()
            .map(|(w, _, o, _)| Env::new(&worlds[*w].world.graph, &worlds[*w].original)?.with_overrides(o))
            .collect::<Result<Vec<_>>>()?;
        let parts = std::cell::RefCell::new([0.0; 2]);
        let (loss, grads) = value_and_grad(&model.store, |b| {
            let s = Session::new(b, model);
            let mut terms = Vec::new();
            let k = 1.0 / cfg.batch_size as f64;
            for (i, (w, e, _, seed)) in draws.iter().enumerate() {
                let tw = &worlds[*w];
                let ep = &tw.world.episodes[*e];
                let tokens = &tw.tokens[*e];
                let l_sap = sap(&s, &envs[i], i, tokens, &ep.path)?;
                let mut r = crate::rng::from_seed(*seed);
                let (l_pid, _) = pid(
                    &s,
                    &envs[i],
                    i,
                    tokens,
                    ep.start(),
                    ep.goal(),
                    cfg.max_steps,
                    cfg.temperature,
                    &mut r,
                )?;
                let mut p = parts.borrow_mut();
                p[0] += k * l_sap.item();
                p[1] += k * l_pid.item();
                terms.push((k * cfg.lambda_ft, l_sap));
                terms.push((k, l_pid));
            }
            weighted(&terms)
        })
        .map_err(|e| numeric(e, iter))?;
        model.store.sgd_step(&grads, cfg.lr_finetune)?;
        let p = parts.into_inner();
        trace.push(LossRecord {
            iter,
            loss,
            parts: [("sap", p[0]), ("pid", p[1])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        });
    }
    Ok(trace)
}
