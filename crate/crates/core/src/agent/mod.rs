//! Instruction-following navigation agent: model, proxy-task losses,
//! pre-training, fine-tuning and greedy rollout.

mod losses;
mod rollout;
mod train;

pub use losses::{loss_and_grads, mlm_loss, mlm_mask_count, mrm_loss, pid_loss, sap_loss, scene_targets, AgentLoss};
pub use rollout::{navigate, rollout, ActionScorer, Oracle, Stationary, DEFAULT_MAX_STEPS};
pub use train::{finetune, pretrain, LossRecord, TrainConfig, TrainWorld};

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{concat_rows, Binding, ParamStore, Tape, Tensor, Var};
use crate::conditioning::{TextEncoder, TextEncoderConfig, TokenId};
use crate::error::{Error, Result};
use crate::pano::{HEADINGS, VIEW_COUNT};
use crate::world::{heading_index_towards, NodeId, Observation, WorldGraph};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub dim: usize,
    pub view_height: usize,
    pub view_width: usize,
    pub channels: usize,
    pub max_len: usize,
    /// Region classes predicted by masked region modeling.
    pub classes: usize,
}

impl AgentConfig {
    pub fn new(vocab_size: usize) -> Self {
        AgentConfig {
            vocab_size,
            embed_dim: 32,
            dim: 32,
            view_height: 8,
            view_width: 8,
            channels: 3,
            max_len: 48,
            classes: crate::scene::SCENE_COUNT,
        }
    }

    pub fn view_len(&self) -> usize {
        self.view_height * self.view_width * self.channels
    }

    pub fn to_meta(&self) -> Vec<f64> {
        [
            self.vocab_size,
            self.embed_dim,
            self.dim,
            self.view_height,
            self.view_width,
            self.channels,
            self.max_len,
            self.classes,
        ]
        .map(|v| v as f64)
        .to_vec()
    }

    pub fn from_meta(meta: &[f64]) -> Result<Self> {
        if meta.len() != 8 {
            return Err(Error::format(format!(
                "agent metadata has {} fields, expected 8",
                meta.len()
            )));
        }
        let mut v = [0usize; 8];
        for (o, m) in v.iter_mut().zip(meta) {
            if !(m.is_finite() && *m >= 1.0 && m.fract() == 0.0 && *m < 1e7) {
                return Err(Error::format(format!(
                    "agent metadata value {m} is not a positive count"
                )));
            }
            *o = *m as usize;
        }
        Ok(AgentConfig {
            vocab_size: v[0],
            embed_dim: v[1],
            dim: v[2],
            view_height: v[3],
            view_width: v[4],
            channels: v[5],
            max_len: v[6],
            classes: v[7],
        })
    }
}

pub const META_KEY: &str = "meta.agent";

/// The navigation policy and its proxy-task heads.
///
/// Views pass through a two-layer ReLU extractor. At each step the state is
/// `tanh(W_t·s + W_c·cur + W_h·hist + b + step[τ])` from the pooled
/// instruction `s`, the current panorama feature, the mean feature of
/// earlier nodes and an embedding of the step index; it
/// attends over position-aware token keys, and a bilinear map scores the
/// view facing each neighbour. STOP is scored from the current feature.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentModel {
    pub cfg: AgentConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
}

impl AgentModel {
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        if [
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.dim,
            cfg.max_len,
            cfg.classes,
            cfg.view_len(),
        ]
        .contains(&0)
        {
            return Err(Error::invalid("agent dimensions must be positive"));
        }
        let text = TextEncoder::new(
            TextEncoderConfig {
                vocab_size: cfg.vocab_size,
                embed_dim: cfg.embed_dim,
                cond_dim: cfg.dim,
            },
            "agt.txt",
        );
        let mut store = ParamStore::new();
        text.init(&mut store, rng);
        let (d, e) = (cfg.dim, cfg.embed_dim);
        let mut lin = |name: &str, out: usize, inp: usize, rng: &mut R| {
            store.insert(name, Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng));
        };
        lin("agt.key", d, e, rng);
        lin("agt.view1.w", d, cfg.view_len(), rng);
        lin("agt.view2.w", d, d, rng);
        for n in [
            "state.txt",
            "state.cur",
            "state.hist",
            "query",
            "ctx",
            "bil",
            "stop",
            "mlm.traj",
            "mrm.ctx",
        ] {
            lin(&format!("agt.{n}"), d, d, rng);
        }
        lin("agt.mlm.head", cfg.vocab_size, d, rng);
        lin("agt.mrm.head", cfg.classes, d, rng);
        store.insert("agt.pos", Tensor::randn(&[cfg.max_len, e], 0.1, rng));
        store.insert("agt.vpos", Tensor::randn(&[VIEW_COUNT, d], 0.1, rng));
        store.insert("agt.step", Tensor::randn(&[cfg.max_len, d], 0.1, rng));
        for n in ["view1.b", "view2.b", "state.b"] {
            store.insert(format!("agt.{n}"), Tensor::zeros(&[1, d]));
        }
        Ok(AgentModel { cfg, store, text })
    }

    pub fn from_store(cfg: AgentConfig, store: ParamStore) -> Result<Self> {
        let reference = AgentModel::new(cfg, &mut crate::rng::from_seed(0))?;
        for (name, t) in reference.store.iter() {
            let got = store
                .get(name)
                .map_err(|_| Error::format(format!("agent checkpoint lacks {name:?}")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(format!(
                    "{name:?} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(AgentModel {
            cfg,
            store,
            text: reference.text,
        })
    }
}

/// A world as the agent sees it: the graph plus one observation per node.
#[derive(Clone, Debug)]
pub struct Env<'a> {
    pub graph: &'a WorldGraph,
    pub obs: Vec<&'a Observation>,
}

impl<'a> Env<'a> {
    pub fn new(graph: &'a WorldGraph, obs: &'a [Observation]) -> Result<Self> {
        if obs.len() != graph.len() || obs.iter().enumerate().any(|(i, o)| o.node != i) {
            return Err(Error::invalid("need one observation per node, in node order"));
        }
        Ok(Env {
            graph,
            obs: obs.iter().collect(),
        })
    }

    /// Replaces the observations of the nodes named in `overrides`.
    pub fn with_overrides(mut self, overrides: &'a [Observation]) -> Result<Self> {
        for o in overrides {
            let slot = self
                .obs
                .get_mut(o.node)
                .ok_or_else(|| Error::invalid(format!("override for unknown node {}", o.node)))?;
            *slot = o;
        }
        Ok(self)
    }

    /// Neighbours in ascending id order followed by STOP (`None`).
    pub fn candidates(&self, node: NodeId) -> Vec<Option<NodeId>> {
        self.graph
            .neighbors(node)
            .iter()
            .map(|(n, _)| Some(*n))
            .chain(std::iter::once(None))
            .collect()
    }
}

/// Per-tape state: the binding plus cached node features.
pub(crate) struct Session<'s, 't> {
    pub b: &'s Binding<'t>,
    pub model: &'s AgentModel,
    horizon: RefCell<HashMap<(usize, NodeId), Var<'t>>>,
}

/// Instruction encoded once per episode.
pub(crate) struct Instruction<'t> {
    pub summary: Var<'t>,
    pub keys: Var<'t>,
}

impl<'s, 't> Session<'s, 't> {
    pub fn new(b: &'s Binding<'t>, model: &'s AgentModel) -> Self {
        Session {
            b,
            model,
            horizon: RefCell::new(HashMap::new()),
        }
    }

    fn lin(&self, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
        crate::lora::linear(self.b, name, x)
    }

    /// Features of a stack of flattened views, `k × dim`.
    pub fn view_features(&self, views: &[&Tensor]) -> Result<Var<'t>> {
        let len = self.model.cfg.view_len();
        let mut data = Vec::with_capacity(views.len() * len);
        for v in views {
            if v.numel() != len {
                return Err(Error::shape(
                    "view_features",
                    format!("view of {} values, expected {len}", v.numel()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let x = self.b.constant(Tensor::matrix(views.len(), len, data)?);
        let h = self
            .lin("agt.view1.w", &x)?
            .add_row(&self.b.param("agt.view1.b")?)?
            .relu()?;
        self.lin("agt.view2.w", &h)?
            .add_row(&self.b.param("agt.view2.b")?)?
            .relu()
    }

    /// Features of the 12 horizon views of a node, cached per environment.
    pub fn horizon(&self, env: &Env, env_key: usize, node: NodeId) -> Result<Var<'t>> {
        if let Some(v) = self.horizon.borrow().get(&(env_key, node)) {
            return Ok(*v);
        }
        let obs = env.obs[node];
        let views: Vec<&Tensor> = obs.views[HEADINGS..2 * HEADINGS].iter().collect();
        let f = self.view_features(&views)?;
        self.horizon.borrow_mut().insert((env_key, node), f);
        Ok(f)
    }

    pub fn current(&self, env: &Env, env_key: usize, node: NodeId) -> Result<Var<'t>> {
        self.horizon(env, env_key, node)?.mean_rows()
    }

    /// Keys are `(emb[token] + pos)·W_keyᵀ`.
    pub fn token_keys(&self, tokens: &[TokenId]) -> Result<Var<'t>> {
        let cfg = &self.model.cfg;
        if tokens.is_empty() {
            return Err(Error::invalid("empty instruction"));
        }
        if tokens.len() > cfg.max_len {
            return Err(Error::invalid(format!(
                "instruction of {} tokens exceeds {}",
                tokens.len(),
                cfg.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= cfg.vocab_size) {
            return Err(Error::invalid(format!("out-of-vocabulary token id {t}")));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let emb = self.b.param(&self.model.text.embedding_name())?.gather_rows(tokens)?;
        let pos = self.b.param("agt.pos")?.gather_rows(&positions)?;
        self.lin("agt.key", &emb.add(&pos)?)
    }

    pub fn instruction(&self, tokens: &[TokenId]) -> Result<Instruction<'t>> {
        Ok(Instruction {
            summary: self.model.text.encode(self.b, tokens)?,
            keys: self.token_keys(tokens)?,
        })
    }

    /// Action logits `1 × (neighbours + 1)` at the last node of `path`,
    /// with candidates in [`Env::candidates`] order.
    pub fn step_logits(&self, env: &Env, env_key: usize, instr: &Instruction<'t>, path: &[NodeId]) -> Result<Var<'t>> {
        let (&node, earlier) = path.split_last().ok_or_else(|| Error::invalid("empty path"))?;
        env.graph.node(node)?;
        let horizon = self.horizon(env, env_key, node)?;
        let cur = horizon.mean_rows()?;
        let hist = if earlier.is_empty() {
            self.b.constant(Tensor::zeros(&[1, self.model.cfg.dim]))
        } else {
            let feats = earlier
                .iter()
                .map(|n| self.current(env, env_key, *n))
                .collect::<Result<Vec<_>>>()?;
            concat_rows(&feats)?.mean_rows()?
        };
        let state = self
            .lin("agt.state.txt", &instr.summary)?
            .add(&self.lin("agt.state.cur", &cur)?)?
            .add(&self.lin("agt.state.hist", &hist)?)?
            .add(&self.b.param("agt.state.b")?)?
            .add(
                &self
                    .b
                    .param("agt.step")?
                    .gather_rows(&[earlier.len().min(self.model.cfg.max_len - 1)])?,
            )?
            .tanh()?;
        let att = self
            .lin("agt.query", &state)?
            .matmul_t(&instr.keys)?
            .scale(1.0 / (self.model.cfg.dim as f64).sqrt())?
            .softmax_rows()?;
        let ctx = att.matmul(&instr.keys)?;
        let g = state.add(&self.lin("agt.ctx", &ctx)?)?.tanh()?;
        let neighbors = env.graph.neighbors(node);
        let headings: Vec<usize> = neighbors
            .iter()
            .map(|(n, _)| heading_index_towards(env.graph, node, *n))
            .collect();
        let stop = self.lin("agt.stop", &cur)?.matmul_t(&g)?;
        let col = if headings.is_empty() {
            stop
        } else {
            let cand = horizon.gather_rows(&headings)?;
            let scores = self.lin("agt.bil", &cand)?.matmul_t(&g)?;
            concat_rows(&[scores, stop])?
        };
        col.transpose()
    }
}

/// Plain-value action logits for the last node of `path`.
pub fn action_logits(model: &AgentModel, env: &Env, tokens: &[TokenId], path: &[NodeId]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let b = Binding::new(&tape, &model.store);
    let s = Session::new(&b, model);
    let instr = s.instruction(tokens)?;
    Ok(s.step_logits(env, 0, &instr, path)?.value().into_data())
}
