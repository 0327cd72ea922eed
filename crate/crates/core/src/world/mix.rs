use rand::seq::SliceRandom;

use super::graph::NodeId;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pano::{partition, Panorama, VIEW_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    Generated,
}

/// The 36 sub-views seen at one node, in `(elevation, heading)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub node: NodeId,
    pub views: Vec<Tensor>,
    pub provenance: Vec<Provenance>,
}

impl Observation {
    pub fn new(node: NodeId, views: Vec<Tensor>, provenance: Provenance) -> Result<Self> {
        if views.len() != VIEW_COUNT {
            return Err(Error::invalid(format!(
                "observation needs {VIEW_COUNT} views, got {}",
                views.len()
            )));
        }
        Ok(Observation {
            node,
            views,
            provenance: vec![provenance; VIEW_COUNT],
        })
    }

    pub fn original(node: NodeId, p: &Panorama) -> Result<Self> {
        let views = partition(p)?.into_iter().map(|v| v.image).collect();
        Self::new(node, views, Provenance::Original)
    }

    pub fn is_generated(&self) -> bool {
        self.provenance.iter().all(|p| *p == Provenance::Generated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixScope {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixPolicy {
    pub ratio: f64,
    pub scope: MixScope,
    pub seed: u64,
}

impl MixPolicy {
    pub fn new(ratio: f64, scope: MixScope, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("mix ratio {ratio} outside [0, 1]")));
        }
        Ok(MixPolicy { ratio, scope, seed })
    }
}

/// `round_half_up(p·K)`.
pub fn mix_count(ratio: f64, k: usize) -> usize {
    ((ratio * k as f64 + 0.5 + 1e-9).floor() as usize).min(k)
}

/// Replaces `mix_count(p, K)` trajectory observations, chosen as a prefix
/// of a seeded shuffle, by their generated counterparts.
pub fn mix_environment<F>(trajectory: &[Observation], generated: F, policy: &MixPolicy) -> Result<Vec<Observation>>
where
    F: Fn(NodeId) -> Option<Observation>,
{
    MixPolicy::new(policy.ratio, policy.scope, policy.seed)?;
    let k = trajectory.len();
    let mut order: Vec<usize> = (0..k).collect();
    let mut r = crate::rng::from_seed(policy.seed);
    order.shuffle(&mut r);
    let mut out = trajectory.to_vec();
    for &i in &order[..mix_count(policy.ratio, k)] {
        let node = trajectory[i].node;
        let mut g =
            generated(node).ok_or_else(|| Error::invalid(format!("no generated observation for node {node}")))?;
        g.provenance = vec![Provenance::Generated; VIEW_COUNT];
        out[i] = g;
    }
    Ok(out)
}
