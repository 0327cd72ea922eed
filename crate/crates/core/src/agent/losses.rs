use rand::seq::index::sample;
use rand::Rng;

use super::{Env, Session};
use crate::autodiff::{Tensor, Var};
use crate::conditioning::TokenId;
use crate::error::{Error, Result};
use crate::pano::{ELEVATIONS, HEADINGS, VIEW_COUNT};
use crate::world::{view_scene, NodeId, WorldGraph};

/// `max(1, round(0.15·L))`.
pub fn mlm_mask_count(len: usize) -> usize {
    ((0.15 * len as f64).round() as usize).max(1).min(len)
}

/// Masks `max(1, round(0.15·L))` instruction tokens and predicts them from
/// the remaining tokens and the mean horizon feature of the path. Mean
/// cross-entropy over masked positions.
pub(crate) fn mlm<'t, R: Rng + ?Sized>(
    s: &Session<'_, 't>,
    env: &Env,
    env_key: usize,
    tokens: &[TokenId],
    mask_id: TokenId,
    path: &[NodeId],
    rng: &mut R,
) -> Result<Var<'t>> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot mask an empty instruction"));
    }
    if path.is_empty() {
        return Err(Error::invalid("masked language modeling needs a trajectory"));
    }
    let mut positions: Vec<usize> = sample(rng, tokens.len(), mlm_mask_count(tokens.len())).into_vec();
    positions.sort_unstable();
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p] = mask_id;
    }
    let feats = path
        .iter()
        .map(|n| s.current(env, env_key, *n))
        .collect::<Result<Vec<_>>>()?;
    let traj = crate::autodiff::concat_rows(&feats)?.mean_rows()?;
    let keys = s.token_keys(&masked)?.gather_rows(&positions)?;
    let h = keys
        .add_row(&crate::lora::linear(s.b, "agt.mlm.traj", &traj)?)?
        .tanh()?;
    let logits = crate::lora::linear(s.b, "agt.mlm.head", &h)?;
    let targets: Vec<usize> = positions.iter().map(|p| tokens[*p]).collect();
    logits.softmax_cross_entropy(&targets)
}

/// One-hot scene classes of the 36 views of `node`, `36 × classes`.
pub fn scene_targets(g: &WorldGraph, node: NodeId, classes: usize) -> Result<Tensor> {
    let mut t = vec![0.0; VIEW_COUNT * classes];
    for e in 0..ELEVATIONS {
        for h in 0..HEADINGS {
            let c = view_scene(g, node, h, e).0;
            if c >= classes {
                return Err(Error::invalid(format!("scene class {c} outside {classes} classes")));
            }
            t[(e * HEADINGS + h) * classes + c] = 1.0;
        }
    }
    Tensor::matrix(VIEW_COUNT, classes, t)
}

/// Zeroes one random view's feature and predicts its class distribution
/// from the view's position and the remaining views; KL(target ‖ predicted).
pub(crate) fn mrm<'t, R: Rng + ?Sized>(
    s: &Session<'_, 't>,
    views: &[Tensor],
    targets: &Tensor,
    rng: &mut R,
) -> Result<Var<'t>> {
    let classes = s.model.cfg.classes;
    if views.len() != VIEW_COUNT || targets.shape() != [VIEW_COUNT, classes] {
        return Err(Error::invalid(format!(
            "masked region modeling needs {VIEW_COUNT} views and a {VIEW_COUNT}x{classes} target"
        )));
    }
    let j = rng.random_range(0..VIEW_COUNT);
    let row = &targets.data()[j * classes..(j + 1) * classes];
    if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("target row {j} is not a distribution")));
    }
    let refs: Vec<&Tensor> = views.iter().collect();
    let mut keep = Tensor::ones(&[VIEW_COUNT, s.model.cfg.dim]);
    for v in &mut keep.data_mut()[j * s.model.cfg.dim..(j + 1) * s.model.cfg.dim] {
        *v = 0.0;
    }
    let feats = s.view_features(&refs)?.mul(&s.b.constant(keep))?;
    let ctx = feats.mean_rows()?;
    let h = crate::lora::linear(s.b, "agt.mrm.ctx", &ctx)?
        .add(&s.b.param("agt.vpos")?.gather_rows(&[j])?)?
        .tanh()?;
    let logp = crate::lora::linear(s.b, "agt.mrm.head", &h)?.log_softmax_rows()?;
    logp.kl_divergence(&Tensor::matrix(1, classes, row.to_vec())?)
}

/// `−log p(action)` from a `1 × n` logit row.
pub(crate) fn neg_log_prob<'t>(logits: &Var<'t>, index: usize) -> Result<Var<'t>> {
    logits
        .log_softmax_rows()?
        .transpose()?
        .gather_rows(&[index])?
        .sum()?
        .scale(-1.0)
}

fn action_index(env: &Env, node: NodeId, action: Option<NodeId>) -> Result<usize> {
    env.candidates(node)
        .iter()
        .position(|c| *c == action)
        .ok_or_else(|| Error::invalid(format!("action {action:?} is not a candidate at node {node}")))
}

/// Σ over the expert path of `−log p(expert action)`; the last step's
/// expert action is STOP.
pub(crate) fn sap<'t>(
    s: &Session<'_, 't>,
    env: &Env,
    env_key: usize,
    tokens: &[TokenId],
    path: &[NodeId],
) -> Result<Var<'t>> {
    if path.is_empty() {
        return Err(Error::invalid("single action prediction needs a path"));
    }
    let instr = s.instruction(tokens)?;
    let mut total: Option<Var<'t>> = None;
    for tau in 0..path.len() {
        let expert = path.get(tau + 1).copied();
        let idx = action_index(env, path[tau], expert)?;
        let l = neg_log_prob(&s.step_logits(env, env_key, &instr, &path[..=tau])?, idx)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty path"))
}

/// Rolls the current policy out from `start` (greedy when `temperature` is
/// 0, otherwise sampling from `softmax(logits / temperature)`) and sums
/// `−log p(oracle action)` at every visited state. Returns the loss and the
/// visited path.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pid<'t, R: Rng + ?Sized>(
    s: &Session<'_, 't>,
    env: &Env,
    env_key: usize,
    tokens: &[TokenId],
    start: NodeId,
    goal: NodeId,
    max_steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Var<'t>, Vec<NodeId>)> {
    let instr = s.instruction(tokens)?;
    let mut path = vec![start];
    let mut total: Option<Var<'t>> = None;
    loop {
        let node = *path.last().expect("nonempty");
        let logits = s.step_logits(env, env_key, &instr, &path)?;
        let target = env.graph.oracle_action(node, goal)?;
        let l = neg_log_prob(&logits, action_index(env, node, target)?)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
        if path.len() > max_steps {
            break;
        }
        let choice = super::rollout::choose(&logits.value().into_data(), temperature, rng);
        match env.candidates(node)[choice] {
            Some(next) => path.push(next),
            None => break,
        }
    }
    Ok((total.expect("at least one step"), path))
}

/// Masked language modeling loss for one episode on a fresh tape.
pub fn mlm_loss<R: Rng + ?Sized>(
    model: &super::AgentModel,
    env: &Env,
    tokens: &[TokenId],
    mask_id: TokenId,
    path: &[NodeId],
    rng: &mut R,
) -> Result<f64> {
    with_session(model, |s| mlm(s, env, 0, tokens, mask_id, path, rng))
}

pub fn mrm_loss<R: Rng + ?Sized>(
    model: &super::AgentModel,
    views: &[Tensor],
    targets: &Tensor,
    rng: &mut R,
) -> Result<f64> {
    with_session(model, |s| mrm(s, views, targets, rng))
}

pub fn sap_loss(model: &super::AgentModel, env: &Env, tokens: &[TokenId], path: &[NodeId]) -> Result<f64> {
    with_session(model, |s| sap(s, env, 0, tokens, path))
}

#[allow(clippy::too_many_arguments)]
pub fn pid_loss<R: Rng + ?Sized>(
    model: &super::AgentModel,
    env: &Env,
    tokens: &[TokenId],
    start: NodeId,
    goal: NodeId,
    max_steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<f64> {
    with_session(model, |s| {
        Ok(pid(s, env, 0, tokens, start, goal, max_steps, temperature, rng)?.0)
    })
}

fn with_session<F>(model: &super::AgentModel, f: F) -> Result<f64>
where
    F: for<'s, 't> FnOnce(&Session<'s, 't>) -> Result<Var<'t>>,
{
    let tape = crate::autodiff::Tape::new();
    let b = crate::autodiff::Binding::new(&tape, &model.store);
    let s = Session::new(&b, model);
    Ok(f(&s)?.item())
}

/// One training objective with its inputs, for evaluating it together
/// with its parameter gradients.
#[derive(Clone, Copy, Debug)]
pub enum AgentLoss<'a> {
    Mlm {
        env: &'a Env<'a>,
        tokens: &'a [TokenId],
        mask_id: TokenId,
        path: &'a [NodeId],
    },
    Mrm {
        views: &'a [Tensor],
        targets: &'a Tensor,
    },
    Sap {
        env: &'a Env<'a>,
        tokens: &'a [TokenId],
        path: &'a [NodeId],
    },
    Pid {
        env: &'a Env<'a>,
        tokens: &'a [TokenId],
        start: NodeId,
        goal: NodeId,
        max_steps: usize,
        temperature: f64,
    },
}

/// Value of `loss` and its gradient for every trainable parameter.
pub fn loss_and_grads<R: Rng + ?Sized>(
    model: &super::AgentModel,
    loss: AgentLoss,
    rng: &mut R,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    crate::autodiff::value_and_grad(&model.store, |b| {
        let s = Session::new(b, model);
        match loss {
            AgentLoss::Mlm {
                env,
                tokens,
                mask_id,
                path,
            } => mlm(&s, env, 0, tokens, mask_id, path, rng),
            AgentLoss::Mrm { views, targets } => mrm(&s, views, targets, rng),
            AgentLoss::Sap { env, tokens, path } => sap(&s, env, 0, tokens, path),
            AgentLoss::Pid {
                env,
                tokens,
                start,
                goal,
                max_steps,
                temperature,
            } => Ok(pid(&s, env, 0, tokens, start, goal, max_steps, temperature, rng)?.0),
        }
    })
}
