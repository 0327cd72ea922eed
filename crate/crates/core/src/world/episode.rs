use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{NodeId, WorldGraph};
use crate::error::{Error, Result};

/// An instruction paired with its ground-truth path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub instruction: Vec<String>,
    pub path: Vec<NodeId>,
}

impl Episode {
    pub fn start(&self) -> NodeId {
        self.path[0]
    }

    pub fn goal(&self) -> NodeId {
        *self.path.last().expect("episodes have nonempty paths")
    }

    /// Checks the path against a graph: nonempty, adjacent steps, nonempty
    /// instruction.
    pub fn validate(&self, g: &WorldGraph) -> Result<()> {
        if self.path.is_empty() {
            return Err(Error::format("episode path is empty"));
        }
        if self.instruction.is_empty() {
            return Err(Error::format("episode instruction is empty"));
        }
        for n in &self.path {
            g.node(*n)?;
        }
        g.path_length(&self.path)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub count: usize,
    /// Inclusive bounds on the number of nodes in a path.
    pub min_nodes: usize,
    pub max_nodes: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            count: 24,
            min_nodes: 3,
            max_nodes: 8,
        }
    }
}

/// "walk past the X , walk past the Y , stop at the Z" naming the scenes
/// of every node after the start.
pub fn instruction_for(g: &WorldGraph, path: &[NodeId]) -> Vec<String> {
    let mut out = Vec::new();
    let Some((goal, rest)) = path.split_last() else {
        return out;
    };
    for n in rest.iter().skip(1) {
        out.extend(["walk", "past", "the", g.nodes()[*n].scene.label(), ","].map(String::from));
    }
    out.extend(["stop", "at", "the", g.nodes()[*goal].scene.label()].map(String::from));
    out
}

/// Samples start/goal pairs whose shortest path has between `min_nodes`
/// and `max_nodes` nodes. When the graph has no such pair the lower bound
/// drops to 2 (a single hop).
pub fn make_episodes<R: Rng + ?Sized>(g: &WorldGraph, cfg: &EpisodeConfig, r: &mut R) -> Result<Vec<Episode>> {
    if cfg.min_nodes > cfg.max_nodes || cfg.max_nodes < 2 {
        return Err(Error::invalid("invalid episode path bounds"));
    }
    let paths: Vec<Vec<Vec<NodeId>>> = (0..g.len())
        .map(|s| (0..g.len()).map(|t| g.shortest_path(s, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let pick = |lo: usize| -> Vec<(NodeId, NodeId)> {
        let mut v = Vec::new();
        for (s, row) in paths.iter().enumerate() {
            for (t, p) in row.iter().enumerate() {
                if s != t && (lo..=cfg.max_nodes).contains(&p.len()) {
                    v.push((s, t));
                }
            }
        }
        v
    };
    let mut pairs = pick(cfg.min_nodes.max(2));
    if pairs.is_empty() {
        pairs = pick(2);
    }
    if pairs.is_empty() {
        return Err(Error::Graph("no start/goal pair fits the path bounds".into()));
    }
    Ok((0..cfg.count)
        .map(|_| {
            let (s, t) = pairs[r.random_range(0..pairs.len())];
            let path = paths[s][t].clone();
            Episode {
                instruction: instruction_for(g, &path),
                path,
            }
        })
        .collect())
}
