use rand::Rng;

use crate::autodiff::{Binding, ParamStore, Tape, Tensor, Var};
use crate::conditioning::{TextEncoder, TextEncoderConfig, TokenId};
use crate::error::{Error, Result};
use crate::lora::linear;

use super::schedule::NoiseSchedule;

/// Image ↔ latent codec. Only the identity mode exists: the latent is the
/// pixel grid itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentCodec {
    #[default]
    Identity,
}

impl LatentCodec {
    pub fn encode(&self, image: &Tensor) -> Tensor {
        match self {
            LatentCodec::Identity => image.clone(),
        }
    }

    pub fn decode(&self, latent: &Tensor) -> Tensor {
        match self {
            LatentCodec::Identity => latent.clone(),
        }
    }
}

/// Anything that predicts the noise in a latent. Latents are `H × W × C`.
pub trait EpsModel {
    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &[f64]) -> Result<Tensor>;
}

/// Differentiable noise predictor used by the training objective.
pub trait TapeEps {
    /// Noise prediction recorded on the binding's tape. The layout of the
    /// returned var is the model's own; [`TapeEps::target_layout`] converts a
    /// latent-shaped tensor into it.
    fn eps_on_tape<'t>(&self, b: &Binding<'t>, z_t: &Tensor, t: usize, caption: &[TokenId]) -> Result<Var<'t>>;

    fn target_layout(&self, eps: &Tensor) -> Result<Tensor> {
        Ok(eps.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub cond_dim: usize,
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: 8,
            width: 8,
            channels: 3,
            patch: 2,
            dim: 64,
            blocks: 2,
            ff_mult: 2,
            cond_dim: 16,
            steps: super::schedule::DEFAULT_STEPS,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if [
            c.height, c.width, c.channels, c.patch, c.dim, c.blocks, c.ff_mult, c.cond_dim, c.steps,
        ]
        .contains(&0)
        {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if c.height % c.patch != 0 || c.width % c.patch != 0 {
            return Err(Error::invalid(format!(
                "patch {} must divide {}x{}",
                c.patch, c.height, c.width
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// `H×W×C` latent → `tokens × patch_len`, patches in raster order.
    pub fn patchify(&self, z: &[f64]) -> Vec<f64> {
        let (p, w, c) = (self.patch, self.width, self.channels);
        let per_row = w / p;
        let mut out = Vec::with_capacity(z.len());
        for tok in 0..self.tokens() {
            let (py, px) = (tok / per_row, tok % per_row);
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * w + px * p) * c;
                out.extend_from_slice(&z[start..start + p * c]);
            }
        }
        out
    }

    pub fn unpatchify(&self, tokens: &[f64]) -> Vec<f64> {
        let (p, w, c) = (self.patch, self.width, self.channels);
        let per_row = w / p;
        let mut out = vec![0.0; tokens.len()];
        let plen = self.patch_len();
        for tok in 0..self.tokens() {
            let (py, px) = (tok / per_row, tok % per_row);
            for dy in 0..p {
                let y = py * p + dy;
                let dst = (y * w + px * p) * c;
                let src = tok * plen + dy * p * c;
                out[dst..dst + p * c].copy_from_slice(&tokens[src..src + p * c]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub denoiser: DenoiserConfig,
    pub text: TextEncoderConfig,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl GeneratorConfig {
    pub fn new(denoiser: DenoiserConfig, vocab_size: usize) -> Self {
        GeneratorConfig {
            text: TextEncoderConfig {
                vocab_size,
                embed_dim: 16,
                cond_dim: denoiser.cond_dim,
            },
            denoiser,
            beta_start: super::schedule::DEFAULT_BETA_START,
            beta_end: super::schedule::DEFAULT_BETA_END,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.denoiser.steps, self.beta_start, self.beta_end)
    }

    /// Flat numeric encoding stored alongside the weights in checkpoints.
    pub fn to_meta(&self) -> Vec<f64> {
        let d = &self.denoiser;
        vec![
            d.height as f64,
            d.width as f64,
            d.channels as f64,
            d.patch as f64,
            d.dim as f64,
            d.blocks as f64,
            d.ff_mult as f64,
            d.cond_dim as f64,
            d.steps as f64,
            self.text.vocab_size as f64,
            self.text.embed_dim as f64,
            self.beta_start,
            self.beta_end,
        ]
    }

    pub fn from_meta(meta: &[f64]) -> Result<Self> {
        if meta.len() != 13 {
            return Err(Error::format(format!(
                "generator metadata has {} fields, expected 13",
                meta.len()
            )));
        }
        let u = |i: usize| -> Result<usize> {
            let v = meta[i];
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::format(format!(
                    "generator metadata field {i} is not a count: {v}"
                )))
            }
        };
        let denoiser = DenoiserConfig {
            height: u(0)?,
            width: u(1)?,
            channels: u(2)?,
            patch: u(3)?,
            dim: u(4)?,
            blocks: u(5)?,
            ff_mult: u(6)?,
            cond_dim: u(7)?,
            steps: u(8)?,
        };
        denoiser.validate().map_err(|e| Error::format(e.to_string()))?;
        let cfg = GeneratorConfig {
            text: TextEncoderConfig {
                vocab_size: u(9)?,
                embed_dim: u(10)?,
                cond_dim: denoiser.cond_dim,
            },
            denoiser,
            beta_start: meta[11],
            beta_end: meta[12],
        };
        cfg.schedule().map_err(|e| Error::format(e.to_string()))?;
        if cfg.text.vocab_size == 0 || cfg.text.embed_dim == 0 {
            return Err(Error::format("text encoder dimensions must be positive"));
        }
        Ok(cfg)
    }
}

pub const META_KEY: &str = "meta.generator";

/// Text encoder plus residual attention/MLP denoiser over image patches.
///
/// Per token: `x = patch·W_inᵀ + b_in + pos + time[t]`, then `blocks`
/// residual units of single-head self-attention (`q, k, v, o`) and a GELU
/// feed-forward, each taking `cond·W_condᵀ` added to its input, then a
/// linear read-out to patch space.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub codec: LatentCodec,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.denoiser.validate()?;
        cfg.schedule()?;
        let d = cfg.denoiser;
        let text = TextEncoder::new(cfg.text, "txt");
        let mut store = ParamStore::new();
        text.init(&mut store, rng);
        let (dim, plen, ff) = (d.dim, d.patch_len(), d.dim * d.ff_mult);
        let lin = |out: usize, inp: usize, rng: &mut R| Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng);
        store.insert("den.in.w", lin(dim, plen, rng));
        store.insert("den.in.b", Tensor::zeros(&[1, dim]));
        store.insert("den.pos", Tensor::randn(&[d.tokens(), dim], 0.1, rng));
        store.insert("den.time", Tensor::randn(&[d.steps, dim], 0.1, rng));
        store.insert("den.cond", lin(dim, d.cond_dim, rng).scaled(0.5));
        for i in 0..d.blocks {
            for m in ["q", "k", "v", "o"] {
                store.insert(format!("den.block{i}.{m}"), lin(dim, dim, rng).scaled(0.5));
            }
            store.insert(format!("den.block{i}.ff1.w"), lin(ff, dim, rng));
            store.insert(format!("den.block{i}.ff1.b"), Tensor::zeros(&[1, ff]));
            store.insert(format!("den.block{i}.ff2.w"), lin(dim, ff, rng).scaled(0.5));
            store.insert(format!("den.block{i}.ff2.b"), Tensor::zeros(&[1, dim]));
        }
        store.insert("den.out.w", lin(plen, dim, rng).scaled(0.2));
        store.insert("den.out.b", Tensor::zeros(&[1, plen]));
        Ok(Generator {
            cfg,
            store,
            text,
            codec: LatentCodec::Identity,
        })
    }

    /// Rebuilds a generator from stored weights, checking every shape.
    pub fn from_store(cfg: GeneratorConfig, store: ParamStore) -> Result<Self> {
        let reference = Generator::new(cfg.clone(), &mut crate::rng::from_seed(0))?;
        for (name, t) in reference.store.iter() {
            let got = store
                .get(name)
                .map_err(|_| Error::format(format!("checkpoint lacks {name:?}")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(format!(
                    "{name:?} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Generator {
            text: reference.text,
            cfg,
            store,
            codec: LatentCodec::Identity,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.cfg.schedule()
    }

    /// Attention and conditioning matrices, the default adapter targets.
    pub fn adapter_targets(&self) -> Vec<String> {
        let mut t: Vec<String> = (0..self.cfg.denoiser.blocks)
            .flat_map(|i| ["q", "k", "v", "o"].map(|m| format!("den.block{i}.{m}")))
            .collect();
        t.push("den.cond".into());
        t.push(self.text.projection_name());
        t
    }

    /// Default targets that can hold a rank-`rank` adapter; matrices whose
    /// smaller side is below `rank` are left out.
    pub fn adapter_targets_for(&self, rank: usize) -> Vec<String> {
        self.adapter_targets()
            .into_iter()
            .filter(|t| {
                self.store
                    .get(t)
                    .map(|w| w.rows().min(w.cols()) >= rank)
                    .unwrap_or(false)
            })
            .collect()
    }

    /// Names of the frozen base parameters (everything but adapters).
    pub fn base_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| !n.starts_with(crate::lora::PREFIX))
            .cloned()
            .collect()
    }

    pub fn condition(&self, caption: &[TokenId]) -> Result<Vec<f64>> {
        self.text.encode_value(&self.store, caption)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let want = self.cfg.denoiser.latent_shape();
        if z.shape() != want {
            return Err(Error::shape(
                "denoiser",
                format!("latent {:?}, model expects {want:?}", z.shape()),
            ));
        }
        Ok(())
    }

    /// Forward pass on a tape. Returns `tokens × patch_len`.
    pub fn forward<'t>(&self, b: &Binding<'t>, z_t: &Tensor, t: usize, cond: &Var<'t>) -> Result<Var<'t>> {
        self.check_latent(z_t)?;
        let d = self.cfg.denoiser;
        if t >= d.steps {
            return Err(Error::invalid(format!("step {t} outside 0..{}", d.steps)));
        }
        let tokens = Tensor::matrix(d.tokens(), d.patch_len(), d.patchify(z_t.data()))?;
        let x = b.constant(tokens);
        let mut h = linear(b, "den.in.w", &x)?.add_row(&b.param("den.in.b")?)?;
        h = h.add(&b.param("den.pos")?)?;
        h = h.add_row(&b.param("den.time")?.gather_rows(&[t])?)?;
        let c = linear(b, "den.cond", cond)?;
        let inv_sqrt_d = 1.0 / (d.dim as f64).sqrt();
        for i in 0..d.blocks {
            let p = |m: &str| format!("den.block{i}.{m}");
            h = h.add_row(&c)?;
            let q = linear(b, &p("q"), &h)?;
            let k = linear(b, &p("k"), &h)?;
            let v = linear(b, &p("v"), &h)?;
            let attn = q.matmul_t(&k)?.scale(inv_sqrt_d)?.softmax_rows()?;
            h = h.add(&linear(b, &p("o"), &attn.matmul(&v)?)?)?;
            let f = linear(b, &p("ff1.w"), &h)?.add_row(&b.param(&p("ff1.b"))?)?.gelu()?;
            h = h.add(&linear(b, &p("ff2.w"), &f)?.add_row(&b.param(&p("ff2.b"))?)?)?;
        }
        linear(b, "den.out.w", &h)?.add_row(&b.param("den.out.b")?)
    }
}

impl EpsModel for Generator {
    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let b = Binding::new(&tape, &self.store);
        let c = b.constant(Tensor::matrix(1, cond.len(), cond.to_vec())?);
        let out = self.forward(&b, z_t, t, &c)?.value();
        Tensor::new(z_t.shape().to_vec(), self.cfg.denoiser.unpatchify(out.data()))
    }
}

impl TapeEps for Generator {
    fn eps_on_tape<'t>(&self, b: &Binding<'t>, z_t: &Tensor, t: usize, caption: &[TokenId]) -> Result<Var<'t>> {
        let cond = self.text.encode(b, caption)?;
        self.forward(b, z_t, t, &cond)
    }

    fn target_layout(&self, eps: &Tensor) -> Result<Tensor> {
        self.check_latent(eps)?;
        let d = self.cfg.denoiser;
        Tensor::matrix(d.tokens(), d.patch_len(), d.patchify(eps.data()))
    }
}

trait Scaled {
    fn scaled(self, c: f64) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= c);
        self
    }
}
