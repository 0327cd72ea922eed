//! `panogen`: world synthesis, caption pairs, generator training and
//! adaptation, panorama generation, agent training, evaluation and
//! Fréchet reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "panogen", version, about = "Panorama generation and navigation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Seed {
    /// Run seed; every random draw comes from a named stream of it.
    #[arg(long)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a world directory (world.json, episodes.jsonl, panos/).
    MakeWorld(MakeWorld),
    /// Write one caption pair per sub-view of every node.
    BuildPairs(BuildPairs),
    /// Train a base generator from caption pairs.
    TrainBase(TrainBase),
    /// Train LoRA adapters on a frozen base generator.
    Adapt(Adapt),
    /// Generate panoramas for every node of a world.
    Generate(Generate),
    /// Pre-train a navigation agent.
    Pretrain(Pretrain),
    /// Fine-tune a navigation agent, optionally mixing generated views.
    Finetune(Finetune),
    /// Evaluate an agent or a reference policy.
    Eval(Eval),
    /// Fréchet distance between two panorama directories.
    Fid(Fid),
    /// Check files against their schema.
    Validate(Validate),
    /// Rank, masking-strategy, domain-gap and mix-ratio sweeps.
    #[command(subcommand)]
    Ablations(Ablation),
}

#[derive(Args, Debug)]
struct MakeWorld {
    #[command(flatten)]
    seed: Seed,
    #[arg(long, default_value_t = 16)]
    nodes: usize,
    #[arg(long, default_value_t = 24)]
    episodes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildPairs {
    /// Path of a world.json.
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainBase {
    #[command(flatten)]
    seed: Seed,
    #[arg(long)]
    pairs: PathBuf,
    /// Directory the pair image paths are relative to; defaults to the
    /// directory holding the pairs file.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optional loss trace (JSON Lines).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Adapt {
    #[command(flatten)]
    seed: Seed,
    /// Base generator checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Adapter checkpoint (only `lora.*` entries).
    #[arg(long)]
    out: PathBuf,
    /// Loss trace; defaults to `<out>.trace.jsonl`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Inpaint,
    Outpaint,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MaskArg {
    Srm,
    Erm,
    Him,
    Prm,
}

#[derive(Args, Debug)]
struct Generate {
    #[command(flatten)]
    seed: Seed,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Required with `--mode inpaint`.
    #[arg(long, value_enum, required_if_eq("mode", "inpaint"))]
    mask: Option<MaskArg>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    world: PathBuf,
    /// Output directory; receives panos/node_XXX.pan and generation.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct AgentTraining {
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 15)]
    max_steps: usize,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[command(flatten)]
    seed: Seed,
    /// One or more world.json files.
    #[arg(long, required = true, num_args = 1..)]
    world: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[command(flatten)]
    train: AgentTraining,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Finetune {
    #[command(flatten)]
    seed: Seed,
    /// Pre-trained agent checkpoint.
    #[arg(long)]
    agent: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    world: Vec<PathBuf>,
    /// Generated panorama directories, one per world, in the same order.
    #[arg(long, num_args = 1..)]
    gen_dir: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.0, value_parser = parse_ratio)]
    mix_ratio: f64,
    #[arg(long, default_value_t = 1500)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    lambda_ft: f64,
    /// Demonstrator sampling temperature; 0 follows the greedy policy.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[command(flatten)]
    train: AgentTraining,
    /// Agent checkpoint, or the sweep report with `--sweep-ratios`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fine-tune once per ratio and write a mix-ratio report instead.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio)]
    sweep_ratios: Vec<f64>,
    /// Seeds of the sweep; defaults to `--seed`.
    #[arg(long, value_delimiter = ',')]
    sweep_seeds: Vec<u64>,
    /// Held-out worlds the sweep evaluates on.
    #[arg(long, num_args = 1..)]
    eval_world: Vec<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PolicyArg {
    Oracle,
    Stationary,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    world: PathBuf,
    /// Episodes to run; defaults to the world's episodes.jsonl.
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long, conflicts_with = "policy", required_unless_present = "policy")]
    agent: Option<PathBuf>,
    /// Reference policy instead of a trained agent.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    #[arg(long, default_value_t = 15)]
    max_steps: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Fid {
    #[arg(long)]
    set_a: PathBuf,
    #[arg(long)]
    set_b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Validate {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct GeneratorBudget {
    #[arg(long, default_value_t = 256)]
    per_domain: usize,
    #[arg(long, default_value_t = 64)]
    reference: usize,
    #[arg(long, default_value_t = 600)]
    base_iters: usize,
    #[arg(long, default_value_t = 300)]
    adapt_iters: usize,
}

#[derive(Args, Debug, Clone)]
struct NavBudget {
    #[arg(long, default_value_t = 10)]
    train_worlds: usize,
    #[arg(long, default_value_t = 5)]
    test_worlds: usize,
    #[arg(long, default_value_t = 12)]
    nodes: usize,
    #[arg(long, default_value_t = 48)]
    episodes: usize,
    #[arg(long, default_value_t = 3000)]
    gen_base_iters: usize,
    #[arg(long, default_value_t = 2000)]
    gen_adapt_iters: usize,
    #[arg(long, default_value_t = 2000)]
    pretrain_iters: usize,
    #[arg(long, default_value_t = 1500)]
    finetune_iters: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Ablation {
    /// Adapter rank sweep on the two-domain texture task.
    Rank {
        #[command(flatten)]
        seed: Seed,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        ranks: Vec<usize>,
        #[command(flatten)]
        budget: GeneratorBudget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Base versus adapted generator Fréchet distance, one row per seed.
    DomainGap {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        budget: GeneratorBudget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masking-strategy sweep for environment mixing.
    Mask {
        #[command(flatten)]
        seed: Seed,
        #[arg(long, value_delimiter = ',', default_value = "srm,erm,him,prm")]
        strategies: Vec<MaskArg>,
        #[arg(long, default_value_t = 0.5, value_parser = parse_ratio)]
        ratio: f64,
        #[command(flatten)]
        budget: NavBudget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix-ratio sweep on synthesized train and held-out worlds.
    Mix {
        #[command(flatten)]
        seed: Seed,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7", value_parser = parse_ratio)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[command(flatten)]
        budget: NavBudget,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("ratio {v} outside [0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
