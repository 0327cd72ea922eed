//! Low-rank adaptation of frozen linear weights: `W = W0 + scale·B·A`.
//!
//! Adapted weights are looked up by name. For a base weight `name` (an
//! `out × in` matrix) the adapter lives under `lora.<name>.A` (`r × in`),
//! `lora.<name>.B` (`out × r`) and `lora.<name>.scale` (one element).

use rand::Rng;

use crate::autodiff::{Binding, ParamStore, Tensor, Var};
use crate::diffusion::{Generator, TrainPair};
use crate::error::{Error, Result};

pub const PREFIX: &str = "lora.";

pub fn a_name(target: &str) -> String {
    format!("{PREFIX}{target}.A")
}

pub fn b_name(target: &str) -> String {
    format!("{PREFIX}{target}.B")
}

pub fn scale_name(target: &str) -> String {
    format!("{PREFIX}{target}.scale")
}

/// A frozen `m × n` matrix with a trainable rank-`r` update.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub base: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

impl LoraLayer {
    /// `A ~ N(0, 1/r)`, `B = 0`, `scale = alpha / r`.
    pub fn new<R: Rng + ?Sized>(base: Tensor, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if base.shape().len() != 2 {
            return Err(Error::shape(
                "lora",
                format!("base must be a matrix, got {:?}", base.shape()),
            ));
        }
        let (m, n) = (base.rows(), base.cols());
        check_rank(rank, m, n)?;
        Ok(LoraLayer {
            a: Tensor::randn(&[rank, n], 1.0 / (rank as f64).sqrt(), rng),
            b: Tensor::zeros(&[m, rank]),
            base,
            rank,
            scale: alpha / rank as f64,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `W0·h + scale·B·(A·h)` for `h` of shape `n × k`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let tape = crate::autodiff::Tape::new();
        let (w0, a, b, h) = (
            tape.constant(self.base.clone()),
            tape.constant(self.a.clone()),
            tape.constant(self.b.clone()),
            tape.constant(h.clone()),
        );
        Ok(lora_forward_cols(&w0, &a, &b, self.scale, &h)?.value())
    }

    /// Dense `W0 + scale·B·A`.
    pub fn merge(&self) -> Result<Tensor> {
        let mut w = self.base.clone();
        let ba = crate::autodiff::matmul(&self.b, &self.a)?;
        for (w, d) in w.data_mut().iter_mut().zip(ba.data()) {
            *w += self.scale * d;
        }
        Ok(w)
    }
}

fn check_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    if rank == 0 || rank > m.min(n) {
        return Err(Error::invalid(format!(
            "LoRA rank {rank} must be in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    Ok(())
}

/// Column-vector form: `W0·h + scale·B·(A·h)`. Gradients reach only the
/// vars that require them, so a constant `W0` stays frozen.
pub fn lora_forward_cols<'t>(w0: &Var<'t>, a: &Var<'t>, b: &Var<'t>, scale: f64, h: &Var<'t>) -> Result<Var<'t>> {
    let base = w0.matmul(h)?;
    let delta = b.matmul(&a.matmul(h)?)?.scale(scale)?;
    base.add(&delta)
}

/// Row form used by the models: `x·W0ᵀ + scale·(x·Aᵀ)·Bᵀ` for `x` of shape
/// `k × in`.
pub fn lora_forward_rows<'t>(x: &Var<'t>, w0: &Var<'t>, a: &Var<'t>, b: &Var<'t>, scale: f64) -> Result<Var<'t>> {
    let base = x.matmul_t(w0)?;
    let delta = x.matmul_t(a)?.matmul_t(b)?.scale(scale)?;
    base.add(&delta)
}

/// `x·Wᵀ` for the named weight, routed through its adapter when one is
/// attached.
pub fn linear<'t>(bind: &Binding<'t>, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
    let w0 = bind.param(name)?;
    let store = bind.store();
    let an = a_name(name);
    if store.contains(&an) {
        let scale = store.get(&scale_name(name))?.data()[0];
        let a = bind.param(&an)?;
        let b = bind.param(&b_name(name))?;
        lora_forward_rows(x, &w0, &a, &b, scale)
    } else {
        x.matmul_t(&w0)
    }
}

/// Adapter hyper-parameters.
///
/// The default learning rate is much larger than what large text-to-image
/// models use (1e-7): the toy denoiser has orders of magnitude fewer
/// parameters and a plain SGD update, so 1e-3 is the comparable step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl AdaptationConfig {
    pub fn new(rank: usize, targets: Vec<String>) -> Self {
        AdaptationConfig {
            rank,
            alpha: rank as f64,
            targets,
            lr: 1e-3,
            iterations: 40,
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("learning rate and alpha must be finite"));
        }
        Ok(())
    }
}

/// Wraps every target weight with a fresh adapter and freezes everything
/// else in the store.
pub fn attach<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rank: usize,
    alpha: f64,
    targets: &[String],
    rng: &mut R,
) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid("no adapter targets"));
    }
    for t in targets {
        let w = store
            .get(t)
            .map_err(|_| Error::invalid(format!("unknown adapter target {t:?}")))?;
        if w.shape().len() != 2 {
            return Err(Error::invalid(format!("adapter target {t:?} is not a matrix")));
        }
        check_rank(rank, w.rows(), w.cols())?;
        if store.contains(&a_name(t)) {
            return Err(Error::invalid(format!("{t:?} already has an adapter")));
        }
    }
    store.freeze_all();
    for t in targets {
        let layer = LoraLayer::new(store.get(t)?.clone(), rank, alpha, rng)?;
        store.insert(a_name(t), layer.a);
        store.insert(b_name(t), layer.b);
        store.insert(scale_name(t), Tensor::scalar(layer.scale));
        store.freeze(&scale_name(t))?;
    }
    Ok(())
}

/// Base weight names that carry an adapter.
pub fn adapted_targets(store: &ParamStore) -> Vec<String> {
    store
        .names()
        .filter_map(|n| n.strip_prefix(PREFIX)?.strip_suffix(".A").map(str::to_string))
        .collect()
}

/// The adapter named `target`, extracted as a standalone layer.
pub fn layer(store: &ParamStore, target: &str) -> Result<LoraLayer> {
    let a = store.get(&a_name(target))?.clone();
    Ok(LoraLayer {
        base: store.get(target)?.clone(),
        rank: a.rows(),
        a,
        b: store.get(&b_name(target))?.clone(),
        scale: store.get(&scale_name(target))?.data()[0],
    })
}

/// Σ r(m+n) over adapted layers.
pub fn trainable_count(store: &ParamStore) -> usize {
    adapted_targets(store)
        .iter()
        .map(|t| {
            layer(store, t)
                .map(|l| l.rank * (l.base.rows() + l.base.cols()))
                .unwrap_or(0)
        })
        .sum()
}

/// Folds every adapter into its base weight and drops the adapter entries.
/// The result has no frozen parameters.
pub fn merge(store: &ParamStore) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (n, t) in store.iter().filter(|(n, _)| !n.starts_with(PREFIX)) {
        out.insert(n.clone(), t.clone());
    }
    for target in adapted_targets(store) {
        let merged = layer(store, &target)?.merge()?;
        out.insert(target, merged);
    }
    Ok(out)
}

/// Adapter entries only (`lora.*`).
pub fn adapter_state(store: &ParamStore) -> ParamStore {
    store.subset(PREFIX)
}

/// Installs adapter entries from a checkpoint into a base store, freezing
/// the base and the scales.
pub fn load_adapters(store: &mut ParamStore, adapters: &ParamStore) -> Result<()> {
    for (n, _) in adapters.iter() {
        if !n.starts_with(PREFIX) {
            return Err(Error::format(format!(
                "adapter checkpoint holds non-adapter entry {n:?}"
            )));
        }
    }
    store.freeze_all();
    store.extend(adapters);
    for target in adapted_targets(store) {
        let l = layer(store, &target)?;
        if l.a.cols() != l.base.cols() || l.b.rows() != l.base.rows() || l.b.cols() != l.rank {
            return Err(Error::format(format!("adapter shapes do not fit {target:?}")));
        }
        store.freeze(&scale_name(&target))?;
        store.freeze(&target)?;
    }
    Ok(())
}

/// Attaches adapters (unless the generator already carries them) and
/// trains only the adapter matrices with the denoising objective. Returns
/// the per-iteration loss. An iteration count of zero leaves the adapters
/// as attached.
pub fn adapt_generator<R: Rng + ?Sized>(
    gen: &mut Generator,
    data: &[TrainPair],
    cfg: &AdaptationConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("adaptation dataset is empty"));
    }
    AdaptationConfig {
        iterations: cfg.iterations.max(1),
        ..cfg.clone()
    }
    .validate()?;
    if adapted_targets(&gen.store).is_empty() {
        let targets = if cfg.targets.is_empty() {
            gen.adapter_targets_for(cfg.rank)
        } else {
            cfg.targets.clone()
        };
        attach(&mut gen.store, cfg.rank, cfg.alpha, &targets, rng)?;
    }
    gen.train(data, cfg.iterations, cfg.batch_size, cfg.lr, rng)
}
