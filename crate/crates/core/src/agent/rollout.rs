use rand::Rng;

use super::{AgentModel, Env, Session};
use crate::autodiff::{Binding, Tape};
use crate::conditioning::TokenId;
use crate::error::{Error, Result};
use crate::world::NodeId;

pub const DEFAULT_MAX_STEPS: usize = 15;

/// Anything that scores the candidate actions of [`Env::candidates`] at the
/// last node of a partial path.
pub trait ActionScorer {
    fn scores(&self, env: &Env, tokens: &[TokenId], goal_hint: Option<NodeId>, path: &[NodeId]) -> Result<Vec<f64>>;
}

impl ActionScorer for AgentModel {
    fn scores(&self, env: &Env, tokens: &[TokenId], _goal: Option<NodeId>, path: &[NodeId]) -> Result<Vec<f64>> {
        super::action_logits(self, env, tokens, path)
    }
}

/// Scores 1 for the shortest-path action and 0 otherwise. Needs the goal.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl ActionScorer for Oracle {
    fn scores(&self, env: &Env, _t: &[TokenId], goal: Option<NodeId>, path: &[NodeId]) -> Result<Vec<f64>> {
        let goal = goal.ok_or_else(|| Error::invalid("the oracle needs the goal"))?;
        let node = *path.last().ok_or_else(|| Error::invalid("empty path"))?;
        let best = env.graph.oracle_action(node, goal)?;
        Ok(env
            .candidates(node)
            .iter()
            .map(|c| f64::from(u8::from(*c == best)))
            .collect())
    }
}

/// Always stops immediately.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stationary;

impl ActionScorer for Stationary {
    fn scores(&self, env: &Env, _t: &[TokenId], _g: Option<NodeId>, path: &[NodeId]) -> Result<Vec<f64>> {
        let node = *path.last().ok_or_else(|| Error::invalid("empty path"))?;
        let n = env.candidates(node).len();
        Ok((0..n).map(|i| if i + 1 == n { 1.0 } else { 0.0 }).collect())
    }
}

/// Index of the first maximum.
pub(crate) fn greedy(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy (first maximum) when `temperature` is 0, else a draw from
/// `softmax(values / temperature)`.
pub(crate) fn choose<R: Rng + ?Sized>(values: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return greedy(values);
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            return i;
        }
        u -= x;
    }
    values.len() - 1
}

/// Greedy navigation from `start`: STOP or `max_steps` moves end the
/// episode. Ties go to the first candidate (smallest neighbour id).
pub fn rollout<S: ActionScorer + ?Sized>(
    scorer: &S,
    env: &Env,
    tokens: &[TokenId],
    start: NodeId,
    goal_hint: Option<NodeId>,
    max_steps: usize,
) -> Result<Vec<NodeId>> {
    env.graph.node(start)?;
    let mut path = vec![start];
    while path.len() <= max_steps {
        let node = *path.last().expect("nonempty");
        let scores = scorer.scores(env, tokens, goal_hint, &path)?;
        let cands = env.candidates(node);
        if scores.len() != cands.len() || scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("bad action scores at node {node}")));
        }
        match cands[greedy(&scores)] {
            Some(next) => path.push(next),
            None => break,
        }
    }
    Ok(path)
}

/// [`rollout`] for the model, encoding the instruction once and reusing
/// node features across steps.
pub fn navigate(
    model: &AgentModel,
    env: &Env,
    tokens: &[TokenId],
    start: NodeId,
    max_steps: usize,
) -> Result<Vec<NodeId>> {
    let tape = Tape::new();
    let b = Binding::new(&tape, &model.store);
    let s = Session::new(&b, model);
    let instr = s.instruction(tokens)?;
    let mut path = vec![start];
    while path.len() <= max_steps {
        let logits = s.step_logits(env, 0, &instr, &path)?.value().into_data();
        match env.candidates(*path.last().expect("nonempty"))[greedy(&logits)] {
            Some(next) => path.push(next),
            None => break,
        }
    }
    Ok(path)
}
