use super::data::{generated_observations, world_train_pairs, GenerationStats};
use super::domain::DomainConfig;
use super::report::{median, MaskRow, MixRow, Report};
use crate::agent::{
    finetune, navigate, pretrain, rollout, AgentConfig, AgentModel, Env, Oracle, Stationary, TrainConfig, TrainWorld,
};
use crate::conditioning::Vocabulary;
use crate::diffusion::{Generator, GeneratorConfig, TrainPair};
use crate::error::{Error, Result};
use crate::lora::{adapt_generator, AdaptationConfig};
use crate::metrics::{evaluate, EpisodeResult, MetricsReport};
use crate::pano::{MaskSpec, MaskStrategy};
use crate::rng;
use crate::world::{make_world, Observation, World, WorldConfig};

/// Worlds, generator and agent schedules for the navigation experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct NavConfig {
    pub train_worlds: usize,
    pub test_worlds: usize,
    /// Worlds whose views train the base generator before adaptation.
    pub background_worlds: usize,
    pub world: WorldConfig,
    pub generator: DomainConfig,
    pub train: TrainConfig,
    pub mask: MaskStrategy,
    pub radius: f64,
    pub threads: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            train_worlds: 10,
            test_worlds: 5,
            background_worlds: 2,
            world: WorldConfig {
                nodes: 12,
                episodes: 48,
                ..WorldConfig::default()
            },
            generator: DomainConfig {
                base_iters: 3000,
                adapt_iters: 2000,
                ..DomainConfig::default()
            },
            train: TrainConfig {
                iters_pretrain: 2000,
                iters_finetune: 1500,
                ..TrainConfig::default()
            },
            mask: MaskStrategy::Prm,
            radius: crate::metrics::SUCCESS_RADIUS,
            threads: 1,
        }
    }
}

/// Training and held-out worlds plus the adapted generator.
#[derive(Clone, Debug)]
pub struct NavSetup {
    pub train: Vec<World>,
    pub test: Vec<World>,
    pub generator: Generator,
    pub vocab: Vocabulary,
}

fn worlds(seed: u64, kind: &str, n: usize, cfg: &WorldConfig) -> Result<Vec<World>> {
    (0..n)
        .map(|i| make_world(rng::stream_seed(seed, &format!("nav.{kind}.{i}")), cfg))
        .collect()
}

/// Builds the worlds and a generator trained on background worlds and then
/// adapted to the training worlds.
pub fn prepare_nav(seed: u64, cfg: &NavConfig) -> Result<NavSetup> {
    if cfg.train_worlds == 0 || cfg.test_worlds == 0 {
        return Err(Error::invalid("need at least one training and one held-out world"));
    }
    let vocab = Vocabulary::standard();
    let train = worlds(seed, "train", cfg.train_worlds, &cfg.world)?;
    let test = worlds(seed, "test", cfg.test_worlds, &cfg.world)?;
    let background = worlds(seed, "background", cfg.background_worlds, &cfg.world)?;
    let collect = |ws: &[World]| -> Result<Vec<TrainPair>> {
        Ok(ws
            .iter()
            .map(|w| world_train_pairs(w, &vocab))
            .collect::<Result<Vec<_>>>()?
            .concat())
    };
    let g = &cfg.generator;
    let mut generator = Generator::new(
        GeneratorConfig::new(g.denoiser, vocab.len()),
        &mut rng::stream(seed, "nav.gen.init"),
    )?;
    let base_pairs = collect(&background)?;
    if !base_pairs.is_empty() {
        generator.train(
            &base_pairs,
            g.base_iters,
            g.batch_size,
            g.base_lr,
            &mut rng::stream(seed, "nav.gen.base"),
        )?;
    }
    let acfg = AdaptationConfig {
        lr: g.adapt_lr,
        iterations: g.adapt_iters,
        batch_size: g.batch_size,
        ..AdaptationConfig::new(g.rank, Vec::new())
    };
    adapt_generator(
        &mut generator,
        &collect(&train)?,
        &acfg,
        &mut rng::stream(seed, "nav.gen.adapt"),
    )?;
    Ok(NavSetup {
        train,
        test,
        generator,
        vocab,
    })
}

impl NavSetup {
    /// Generated observations for every training world.
    pub fn bank(&self, strategy: MaskStrategy, seed: u64) -> Result<(Vec<Vec<Observation>>, GenerationStats)> {
        let mut r = rng::stream(seed, &format!("nav.bank.{}", strategy.name()));
        let mut out = Vec::with_capacity(self.train.len());
        let (mut masked, mut views) = (0.0, 0);
        for w in &self.train {
            let (obs, s) = generated_observations(&self.generator, w, MaskSpec::new(strategy, 0), &self.vocab, &mut r)?;
            masked += s.mask_fraction * s.views as f64;
            views += s.views;
            out.push(obs);
        }
        Ok((
            out,
            GenerationStats {
                views,
                mask_fraction: masked / views.max(1) as f64,
            },
        ))
    }

    fn corpus(&self, bank: Option<&[Vec<Observation>]>) -> Result<Vec<TrainWorld<'_>>> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, w)| TrainWorld::new(w, bank.map(|b| b[i].clone()), &self.vocab))
            .collect()
    }

    /// A freshly initialised agent pre-trained on the original training
    /// worlds.
    pub fn pretrained_agent(&self, seed: u64, train: &TrainConfig) -> Result<AgentModel> {
        let mut agent = AgentModel::new(AgentConfig::new(self.vocab.len()), &mut rng::stream(seed, "agent.init"))?;
        let cfg = TrainConfig {
            mix_ratio: 0.0,
            ..*train
        };
        pretrain(
            &mut agent,
            &self.corpus(None)?,
            &self.vocab,
            &cfg,
            &mut rng::stream(seed, "agent.pretrain"),
        )?;
        Ok(agent)
    }

    /// Fine-tunes a copy of `agent` with `ratio` of each trajectory's
    /// observations drawn from `bank`.
    pub fn finetuned(
        &self,
        agent: &AgentModel,
        bank: &[Vec<Observation>],
        ratio: f64,
        seed: u64,
        train: &TrainConfig,
    ) -> Result<AgentModel> {
        let mut a = agent.clone();
        let cfg = TrainConfig {
            mix_ratio: ratio,
            ..*train
        };
        finetune(
            &mut a,
            &self.corpus(Some(bank))?,
            &cfg,
            &mut rng::stream(seed, "agent.finetune"),
        )?;
        Ok(a)
    }
}

/// What picks the actions during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Agent(&'a AgentModel),
    Oracle,
    Stationary,
}

/// Rolls `policy` out on every episode of `worlds` and scores the paths.
/// Episodes are split across `threads` workers; results keep episode order.
pub fn evaluate_policy(
    policy: Policy,
    worlds: &[World],
    max_steps: usize,
    radius: f64,
    threads: usize,
) -> Result<MetricsReport> {
    let vocab = Vocabulary::standard();
    let obs = worlds.iter().map(World::observations).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = worlds
        .iter()
        .enumerate()
        .flat_map(|(w, world)| (0..world.episodes.len()).map(move |e| (w, e)))
        .collect();
    let run = |&(w, e): &(usize, usize)| -> Result<Vec<usize>> {
        let world = &worlds[w];
        let ep = &world.episodes[e];
        let env = Env::new(&world.graph, &obs[w])?;
        match policy {
            Policy::Agent(m) => navigate(m, &env, &vocab.encode(&ep.instruction)?, ep.start(), max_steps),
            Policy::Oracle => rollout(&Oracle, &env, &[], ep.start(), Some(ep.goal()), max_steps),
            Policy::Stationary => rollout(&Stationary, &env, &[], ep.start(), None, max_steps),
        }
    };
    let threads = threads.max(1).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(threads).max(1);
    let paths: Vec<Vec<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Numeric("evaluation worker panicked".into()))?
            })
            .collect::<Result<Vec<_>>>()
    })?
    .concat();
    let results: Vec<EpisodeResult> = jobs
        .iter()
        .zip(&paths)
        .map(|(&(w, e), p)| EpisodeResult {
            graph: &worlds[w].graph,
            predicted: p,
            truth: &worlds[w].episodes[e].path,
        })
        .collect();
    evaluate(&results, radius)
}

/// Table-3-shaped sweep: per seed one pre-trained agent, fine-tuned once
/// per ratio with the same stream, evaluated on the held-out worlds.
pub fn mix_sweep(setup: &NavSetup, cfg: &NavConfig, ratios: &[f64], seeds: &[u64]) -> Result<Report> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs ratios and seeds"));
    }
    for r in ratios {
        crate::world::MixPolicy::new(*r, crate::world::MixScope::Finetune, 0)?;
    }
    let (bank, _) = setup.bank(cfg.mask, seeds[0])?;
    let mut sr = vec![Vec::new(); ratios.len()];
    let mut spl = vec![Vec::new(); ratios.len()];
    for &seed in seeds {
        let agent = setup.pretrained_agent(seed, &cfg.train)?;
        for (i, &ratio) in ratios.iter().enumerate() {
            let tuned = setup.finetuned(&agent, &bank, ratio, seed, &cfg.train)?;
            let m = evaluate_policy(
                Policy::Agent(&tuned),
                &setup.test,
                cfg.train.max_steps,
                cfg.radius,
                cfg.threads,
            )?;
            sr[i].push(m.sr);
            spl[i].push(m.spl);
        }
    }
    let rows = ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| MixRow {
            ratio,
            median_sr: median(&sr[i]),
            median_spl: median(&spl[i]),
            sr: sr[i].clone(),
            spl: spl[i].clone(),
        })
        .collect();
    let report = Report::MixRatio {
        seeds: seeds.to_vec(),
        rows,
    };
    report.validate()?;
    Ok(report)
}

/// Table-4-shaped sweep: one generated bank per masking strategy, each
/// used to fine-tune the same pre-trained agent at `ratio`.
pub fn mask_sweep(
    setup: &NavSetup,
    cfg: &NavConfig,
    strategies: &[MaskStrategy],
    ratio: f64,
    seed: u64,
) -> Result<Report> {
    if strategies.is_empty() {
        return Err(Error::invalid("no masking strategies to sweep"));
    }
    let agent = setup.pretrained_agent(seed, &cfg.train)?;
    let rows = strategies
        .iter()
        .map(|&s| {
            let (bank, stats) = setup.bank(s, seed)?;
            let tuned = setup.finetuned(&agent, &bank, ratio, seed, &cfg.train)?;
            let m = evaluate_policy(
                Policy::Agent(&tuned),
                &setup.test,
                cfg.train.max_steps,
                cfg.radius,
                cfg.threads,
            )?;
            Ok(MaskRow {
                strategy: s.name().to_string(),
                mask_fraction: stats.mask_fraction,
                sr: m.sr,
                spl: m.spl,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = Report::Mask { rows };
    report.validate()?;
    Ok(report)
}
