use std::fmt;
use std::path::{Path, PathBuf};

use panogen::agent::{finetune, pretrain, AgentConfig, AgentModel, LossRecord, TrainConfig, TrainWorld};
use panogen::conditioning::Vocabulary;
use panogen::diffusion::{DenoiserConfig, Generator, GeneratorConfig};
use panogen::experiments::{
    caption_pairs, domain_gap, evaluate_policy, generated_observations, mask_sweep, median, mix_sweep, outpaint_node,
    pairs_to_train, prepare_nav, rank_sweep, DomainConfig, MixRow, NavConfig, Policy, Report,
};
use panogen::io::{
    decode_checkpoint, decode_panorama, encode_checkpoint, encode_panorama, load_agent, load_generator, parse_pairs,
    read_text, read_world, save_agent, save_generator, to_jsonl, validate_bytes, write_atomic, write_world,
};
use panogen::lora::{adapt_generator, adapted_targets, adapter_state, load_adapters, AdaptationConfig};
use panogen::metrics::{feature_stats, frechet_distance, FeatureExtractor, FrechetReport};
use panogen::pano::{outpaint_schedule, partition, stitch, MaskSpec, MaskStrategy, Panorama, SubView};
use panogen::rng;
use panogen::world::{make_world, Observation, Provenance, World, WorldConfig};
use serde::Serialize;

use crate::{
    Ablation, Adapt, BuildPairs, Command, Eval, Fid, Finetune, Generate, MakeWorld, MaskArg, Mode, NavBudget,
    PolicyArg, Pretrain, TrainBase, Validate,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(panogen::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(panogen::Error::InvalidArgument(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl<E: Into<panogen::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeWorld(a) => cmd_make_world(a),
        Command::BuildPairs(a) => cmd_build_pairs(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fid(a) => cmd_fid(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Ablations(a) => cmd_ablation(a),
    }
}

/// Fills a sibling temporary directory and renames it onto `out`,
/// replacing a previous output directory.
fn atomic_dir(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| usage(format!("{} is not a directory path", out.display())))?;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{}.partial", name.to_string_lossy()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.is_dir() {
        std::fs::remove_dir_all(out)?;
    }
    std::fs::rename(&tmp, out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(trace)?.as_bytes())?;
    Ok(())
}

fn plain_trace(losses: &[f64]) -> Vec<LossRecord> {
    losses
        .iter()
        .enumerate()
        .map(|(iter, &loss)| LossRecord {
            iter,
            loss,
            parts: Default::default(),
        })
        .collect()
}

fn cmd_make_world(a: MakeWorld) -> Result<()> {
    if a.nodes < 2 {
        return Err(usage(format!("--nodes must be at least 2, got {}", a.nodes)));
    }
    let cfg = WorldConfig {
        nodes: a.nodes,
        episodes: a.episodes,
        ..WorldConfig::default()
    };
    let world = make_world(rng::stream_seed(a.seed.seed, "world"), &cfg)?;
    atomic_dir(&a.out, |dir| Ok(write_world(dir, &world)?))?;
    println!(
        "{} nodes, {} episodes -> {}",
        world.graph.len(),
        world.episodes.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_build_pairs(a: BuildPairs) -> Result<()> {
    let world = read_world(&a.world, None)?;
    let pairs = caption_pairs(&world)?;
    write_atomic(&a.out, to_jsonl(&pairs)?.as_bytes())?;
    println!("{} pairs -> {}", pairs.len(), a.out.display());
    Ok(())
}

fn pair_root(pairs: &Path, root: Option<PathBuf>) -> PathBuf {
    root.unwrap_or_else(|| pairs.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn load_pairs(pairs: &Path, root: Option<PathBuf>, vocab: &Vocabulary) -> Result<Vec<panogen::diffusion::TrainPair>> {
    let list = parse_pairs(&read_text(pairs)?)?;
    Ok(pairs_to_train(&list, &pair_root(pairs, root), vocab)?)
}

fn cmd_train_base(a: TrainBase) -> Result<()> {
    let vocab = Vocabulary::standard();
    let data = load_pairs(&a.pairs, a.root, &vocab)?;
    let denoiser = DenoiserConfig {
        dim: a.dim,
        blocks: a.blocks,
        steps: a.steps,
        ..DenoiserConfig::default()
    };
    let mut gen = Generator::new(
        GeneratorConfig::new(denoiser, vocab.len()),
        &mut rng::stream(a.seed.seed, "init"),
    )?;
    let trace = gen.train(&data, a.iters, a.batch, a.lr, &mut rng::stream(a.seed.seed, "train"))?;
    write_atomic(&a.out, &save_generator(&gen))?;
    if let Some(t) = &a.trace {
        write_trace(t, &plain_trace(&trace))?;
    }
    println!(
        "trained {} iterations on {} pairs -> {}",
        a.iters,
        data.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_adapt(a: Adapt) -> Result<()> {
    if a.rank == 0 {
        return Err(usage("--rank must be at least 1"));
    }
    let vocab = Vocabulary::standard();
    let mut gen = load_generator(&std::fs::read(&a.model)?)?;
    if !adapted_targets(&gen.store).is_empty() {
        return Err(usage("--model already carries adapters; pass the base checkpoint"));
    }
    let data = load_pairs(&a.pairs, a.root, &vocab)?;
    let cfg = AdaptationConfig {
        lr: a.lr,
        iterations: a.iters,
        batch_size: a.batch,
        ..AdaptationConfig::new(a.rank, Vec::new())
    };
    let trace = adapt_generator(&mut gen, &data, &cfg, &mut rng::stream(a.seed.seed, "train"))?;
    write_atomic(&a.out, &encode_checkpoint(&adapter_state(&gen.store)))?;
    let trace_path = a.trace.unwrap_or_else(|| a.out.with_extension("trace.jsonl"));
    write_trace(&trace_path, &plain_trace(&trace))?;
    println!(
        "rank {} on {} targets, {} trainable -> {}",
        a.rank,
        adapted_targets(&gen.store).len(),
        gen.store.trainable_count(),
        a.out.display()
    );
    Ok(())
}

fn strategy(m: MaskArg) -> MaskStrategy {
    match m {
        MaskArg::Srm => MaskStrategy::Srm,
        MaskArg::Erm => MaskStrategy::Erm,
        MaskArg::Him => MaskStrategy::Him,
        MaskArg::Prm => MaskStrategy::Prm,
    }
}

fn load_model(model: &Path, adapter: Option<&Path>) -> Result<Generator> {
    let mut gen = load_generator(&std::fs::read(model)?)?;
    if let Some(path) = adapter {
        load_adapters(&mut gen.store, &decode_checkpoint(&std::fs::read(path)?)?)?;
    }
    Ok(gen)
}

fn pano_name(node: usize) -> String {
    format!("node_{node:03}.pan")
}

#[derive(Serialize)]
struct GenerationSummary {
    mode: &'static str,
    mask: Option<&'static str>,
    nodes: usize,
    mask_fraction: Option<f64>,
    windows: Option<usize>,
    coverage: Option<f64>,
}

fn cmd_generate(a: Generate) -> Result<()> {
    let vocab = Vocabulary::standard();
    let gen = load_model(&a.model, a.adapter.as_deref())?;
    let world = read_world(&a.world, None)?;
    let mut r = rng::stream(a.seed.seed, "sample");
    let (panos, summary) = match a.mode {
        Mode::Inpaint => {
            let s = strategy(a.mask.ok_or_else(|| usage("--mask is required with --mode inpaint"))?);
            let (obs, stats) = generated_observations(&gen, &world, MaskSpec::new(s, 0), &vocab, &mut r)?;
            let panos = obs.iter().map(observation_panorama).collect::<Result<Vec<_>>>()?;
            let summary = GenerationSummary {
                mode: "inpaint",
                mask: Some(s.name()),
                nodes: panos.len(),
                mask_fraction: Some(stats.mask_fraction),
                windows: None,
                coverage: None,
            };
            (panos, summary)
        }
        Mode::Outpaint => {
            let first = &world.panoramas[0];
            let windows = outpaint_schedule(first.width(), first.height(), gen.cfg.denoiser.height)?;
            let covered: std::collections::BTreeSet<usize> =
                (0..windows.len()).flat_map(|i| windows.cells(i)).collect();
            let panos = (0..world.graph.len())
                .map(|n| outpaint_node(&gen, &world, n, &vocab, &mut r))
                .collect::<panogen::Result<Vec<_>>>()?;
            let summary = GenerationSummary {
                mode: "outpaint",
                mask: None,
                nodes: panos.len(),
                mask_fraction: None,
                windows: Some(windows.len()),
                coverage: Some(covered.len() as f64 / (first.width() * first.height()) as f64),
            };
            (panos, summary)
        }
    };
    atomic_dir(&a.out, |dir| {
        std::fs::create_dir(dir.join("panos"))?;
        for (n, p) in panos.iter().enumerate() {
            std::fs::write(dir.join("panos").join(pano_name(n)), encode_panorama(p))?;
        }
        write_json(&dir.join("generation.json"), &summary)
    })?;
    println!("{} panoramas -> {}", panos.len(), a.out.display());
    Ok(())
}

fn observation_panorama(o: &Observation) -> Result<Panorama> {
    let views: Vec<SubView> = o
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| SubView {
            heading_index: i % panogen::pano::HEADINGS,
            elevation_index: i / panogen::pano::HEADINGS,
            image: v.clone(),
        })
        .collect();
    Ok(stitch(&views)?)
}

/// Reads the generated panorama of every node of `world` from `dir/panos`.
fn read_generated(dir: &Path, world: &World) -> Result<Vec<Observation>> {
    (0..world.graph.len())
        .map(|n| {
            let path = dir.join("panos").join(pano_name(n));
            let p = decode_panorama(&std::fs::read(&path)?)?;
            let o = &world.panoramas[n];
            if (p.width(), p.height(), p.channels()) != (o.width(), o.height(), o.channels()) {
                return Err(CliError::Core(panogen::Error::Format(format!(
                    "{} does not match the world's panorama size",
                    path.display()
                ))));
            }
            let views = partition(&p)?.into_iter().map(|v| v.image).collect();
            Ok(Observation::new(n, views, Provenance::Generated)?)
        })
        .collect()
}

fn read_worlds(paths: &[PathBuf]) -> Result<Vec<World>> {
    paths.iter().map(|p| Ok(read_world(p, None)?)).collect()
}

fn cmd_pretrain(a: Pretrain) -> Result<()> {
    let vocab = Vocabulary::standard();
    let worlds = read_worlds(&a.world)?;
    let corpus = worlds
        .iter()
        .map(|w| TrainWorld::new(w, None, &vocab))
        .collect::<panogen::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        iters_pretrain: a.iters,
        lr_pretrain: a.lr,
        batch_size: a.train.batch,
        max_steps: a.train.max_steps,
        ..TrainConfig::default()
    };
    let mut agent = AgentModel::new(AgentConfig::new(vocab.len()), &mut rng::stream(a.seed.seed, "init"))?;
    let trace = pretrain(
        &mut agent,
        &corpus,
        &vocab,
        &cfg,
        &mut rng::stream(a.seed.seed, "train"),
    )?;
    write_atomic(&a.out, &save_agent(&agent))?;
    if let Some(t) = &a.trace {
        write_trace(t, &trace)?;
    }
    println!(
        "pre-trained {} iterations on {} worlds -> {}",
        a.iters,
        worlds.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_finetune(a: Finetune) -> Result<()> {
    let vocab = Vocabulary::standard();
    let base = load_agent(&std::fs::read(&a.agent)?)?;
    let worlds = read_worlds(&a.world)?;
    if !a.gen_dir.is_empty() && a.gen_dir.len() != worlds.len() {
        return Err(usage(format!(
            "{} --gen-dir for {} --world",
            a.gen_dir.len(),
            worlds.len()
        )));
    }
    let needs_bank = a.mix_ratio > 0.0 || a.sweep_ratios.iter().any(|r| *r > 0.0);
    if needs_bank && a.gen_dir.is_empty() {
        return Err(usage("a positive mix ratio needs --gen-dir"));
    }
    let generated = a
        .gen_dir
        .iter()
        .zip(&worlds)
        .map(|(d, w)| read_generated(d, w))
        .collect::<Result<Vec<_>>>()?;
    let corpus = worlds
        .iter()
        .enumerate()
        .map(|(i, w)| TrainWorld::new(w, generated.get(i).cloned(), &vocab))
        .collect::<panogen::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        iters_finetune: a.iters,
        lr_finetune: a.lr,
        lambda_ft: a.lambda_ft,
        temperature: a.temperature,
        batch_size: a.train.batch,
        max_steps: a.train.max_steps,
        mix_ratio: a.mix_ratio,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let tune = |ratio: f64, seed: u64| -> Result<(AgentModel, Vec<LossRecord>)> {
        let mut agent = base.clone();
        let c = TrainConfig {
            mix_ratio: ratio,
            ..cfg
        };
        let trace = finetune(&mut agent, &corpus, &c, &mut rng::stream(seed, "train"))?;
        Ok((agent, trace))
    };
    if a.sweep_ratios.is_empty() {
        let (agent, trace) = tune(a.mix_ratio, a.seed.seed)?;
        write_atomic(&a.out, &save_agent(&agent))?;
        if let Some(t) = &a.trace {
            write_trace(t, &trace)?;
        }
        println!(
            "fine-tuned {} iterations at ratio {} -> {}",
            a.iters,
            a.mix_ratio,
            a.out.display()
        );
        return Ok(());
    }
    if a.eval_world.is_empty() {
        return Err(usage("--sweep-ratios needs --eval-world"));
    }
    let held_out = read_worlds(&a.eval_world)?;
    let seeds = if a.sweep_seeds.is_empty() {
        vec![a.seed.seed]
    } else {
        a.sweep_seeds.clone()
    };
    let mut rows: Vec<MixRow> = a
        .sweep_ratios
        .iter()
        .map(|&ratio| MixRow {
            ratio,
            sr: Vec::new(),
            spl: Vec::new(),
            median_sr: 0.0,
            median_spl: 0.0,
        })
        .collect();
    for &seed in &seeds {
        for row in rows.iter_mut() {
            let (agent, _) = tune(row.ratio, seed)?;
            let m = evaluate_policy(Policy::Agent(&agent), &held_out, cfg.max_steps, a.radius, a.threads)?;
            row.sr.push(m.sr);
            row.spl.push(m.spl);
        }
    }
    for row in rows.iter_mut() {
        row.median_sr = median(&row.sr);
        row.median_spl = median(&row.spl);
    }
    write_report(&a.out, &Report::MixRatio { seeds, rows })
}

fn write_report(path: &Path, report: &Report) -> Result<()> {
    report.validate()?;
    write_atomic(path, format!("{}\n", report.to_json()?).as_bytes())?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn cmd_eval(a: Eval) -> Result<()> {
    if !(a.radius.is_finite() && a.radius >= 0.0) {
        return Err(usage("--radius must be finite and non-negative"));
    }
    let world = read_world(&a.world, a.episodes.as_deref())?;
    let agent = a
        .agent
        .as_ref()
        .map(|p| Ok::<_, CliError>(load_agent(&std::fs::read(p)?)?))
        .transpose()?;
    let policy = match (&agent, a.policy) {
        (Some(m), _) => Policy::Agent(m),
        (None, Some(PolicyArg::Oracle)) => Policy::Oracle,
        (None, Some(PolicyArg::Stationary)) => Policy::Stationary,
        (None, None) => return Err(usage("pass --agent or --policy")),
    };
    let report = evaluate_policy(policy, std::slice::from_ref(&world), a.max_steps, a.radius, a.threads)?;
    report.validate()?;
    write_json(&a.out, &report)?;
    println!(
        "TL {:.3} NE {:.3} SR {:.2} SPL {:.2} GP {:.3} over {} episodes",
        report.tl,
        report.ne,
        report.sr,
        report.spl,
        report.gp,
        report.episodes.len()
    );
    Ok(())
}

fn panorama_views(dir: &Path) -> Result<Vec<panogen::autodiff::Tensor>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "pan"));
    files.sort();
    if files.is_empty() {
        return Err(CliError::Core(panogen::Error::Format(format!(
            "no .pan files in {}",
            dir.display()
        ))));
    }
    let mut out = Vec::new();
    for f in files {
        let p = decode_panorama(&std::fs::read(&f)?)?;
        out.extend(partition(&p)?.into_iter().map(|v| v.image));
    }
    Ok(out)
}

fn cmd_fid(a: Fid) -> Result<()> {
    let fx = FeatureExtractor::standard();
    let (va, vb) = (panorama_views(&a.set_a)?, panorama_views(&a.set_b)?);
    let fid = frechet_distance(&feature_stats(&va, &fx)?, &feature_stats(&vb, &fx)?)?;
    if let Some(out) = &a.out {
        write_json(
            out,
            &FrechetReport {
                fid,
                images_a: va.len(),
                images_b: vb.len(),
            },
        )?;
    }
    println!("{fid:.12e}");
    Ok(())
}

fn cmd_validate(a: Validate) -> Result<()> {
    let mut failed = None;
    for f in &a.files {
        match std::fs::read(f)
            .map_err(panogen::Error::from)
            .and_then(|b| validate_bytes(&b))
        {
            Ok(kind) => println!("{}: {} ok", f.display(), kind.name()),
            Err(e) => {
                println!("{}: invalid: {e}", f.display());
                failed.get_or_insert(CliError::Core(panogen::Error::Format(format!(
                    "{} failed validation",
                    f.display()
                ))));
            }
        }
    }
    failed.map_or(Ok(()), Err)
}

fn nav_config(b: &NavBudget) -> NavConfig {
    let d = NavConfig::default();
    NavConfig {
        train_worlds: b.train_worlds,
        test_worlds: b.test_worlds,
        world: WorldConfig {
            nodes: b.nodes,
            episodes: b.episodes,
            ..d.world
        },
        generator: DomainConfig {
            base_iters: b.gen_base_iters,
            adapt_iters: b.gen_adapt_iters,
            ..d.generator
        },
        train: TrainConfig {
            iters_pretrain: b.pretrain_iters,
            iters_finetune: b.finetune_iters,
            ..d.train
        },
        threads: b.threads,
        ..d
    }
}

fn domain_config(b: &crate::GeneratorBudget, dim: usize) -> DomainConfig {
    let d = DomainConfig::default();
    DomainConfig {
        per_domain: b.per_domain,
        reference: b.reference,
        base_iters: b.base_iters,
        adapt_iters: b.adapt_iters,
        denoiser: DenoiserConfig { dim, ..d.denoiser },
        ..d
    }
}

fn cmd_ablation(a: Ablation) -> Result<()> {
    match a {
        Ablation::Rank {
            seed,
            ranks,
            budget,
            out,
        } => {
            if ranks.contains(&0) {
                return Err(usage("ranks must be at least 1"));
            }
            let dim = ranks
                .iter()
                .copied()
                .max()
                .unwrap_or(0)
                .max(DomainConfig::default().denoiser.dim);
            let rows = rank_sweep(seed.seed, &ranks, &domain_config(&budget, dim))?;
            write_report(&out, &Report::Rank { rows })
        }
        Ablation::DomainGap { seeds, budget, out } => {
            let cfg = domain_config(&budget, DomainConfig::default().denoiser.dim);
            let rows = seeds
                .iter()
                .map(|&s| domain_gap(s, &cfg))
                .collect::<panogen::Result<Vec<_>>>()?;
            let report = Report::DomainGap {
                median_base: median(&rows.iter().map(|r| r.base).collect::<Vec<_>>()),
                median_adapted: median(&rows.iter().map(|r| r.adapted).collect::<Vec<_>>()),
                rows,
            };
            write_report(&out, &report)
        }
        Ablation::Mask {
            seed,
            strategies,
            ratio,
            budget,
            out,
        } => {
            let cfg = nav_config(&budget);
            let setup = prepare_nav(seed.seed, &cfg)?;
            let s: Vec<MaskStrategy> = strategies.into_iter().map(strategy).collect();
            write_report(&out, &mask_sweep(&setup, &cfg, &s, ratio, seed.seed)?)
        }
        Ablation::Mix {
            seed,
            ratios,
            seeds,
            budget,
            out,
        } => {
            let cfg = nav_config(&budget);
            let setup = prepare_nav(seed.seed, &cfg)?;
            write_report(&out, &mix_sweep(&setup, &cfg, &ratios, &seeds)?)
        }
    }
}
