//! Synthetic navigation worlds: graphs of viewpoints, rendered panoramas,
//! instruction-path episodes and observation mixing.

mod episode;
mod graph;
mod mix;
mod render;

pub use episode::{instruction_for, make_episodes, Episode, EpisodeConfig};
pub use graph::{Dijkstra, Node, NodeId, WorldGraph};
pub use mix::{mix_count, mix_environment, MixPolicy, MixScope, Observation, Provenance};
pub use render::{heading_index_towards, render_panorama, view_scene, RenderConfig};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pano::Panorama;
use crate::rng;
use crate::scene::{SceneId, SCENE_COUNT};

/// Grid layout parameters for [`make_world`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub nodes: usize,
    /// Distance between neighbouring grid cells in meters.
    pub spacing: f64,
    /// Maximum absolute positional jitter per axis, in meters.
    pub jitter: f64,
    /// Probability of keeping each grid adjacency that is not in the
    /// spanning tree.
    pub extra_edge_prob: f64,
    pub episodes: usize,
    pub render: RenderConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            nodes: 16,
            spacing: 4.0,
            jitter: 0.8,
            extra_edge_prob: 0.3,
            episodes: 24,
            render: RenderConfig::default(),
        }
    }
}

/// A graph together with one panorama per node and its episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub graph: WorldGraph,
    pub panoramas: Vec<Panorama>,
    pub episodes: Vec<Episode>,
}

impl World {
    pub fn observation(&self, node: NodeId) -> Result<Observation> {
        let p = self
            .panoramas
            .get(node)
            .ok_or_else(|| Error::Graph(format!("node {node} has no panorama")))?;
        Observation::original(node, p)
    }

    pub fn observations(&self) -> Result<Vec<Observation>> {
        (0..self.graph.len()).map(|n| self.observation(n)).collect()
    }
}

pub fn make_world(seed: u64, cfg: &WorldConfig) -> Result<World> {
    if cfg.nodes < 2 {
        return Err(Error::invalid(format!(
            "a world needs at least 2 nodes, got {}",
            cfg.nodes
        )));
    }
    if !(cfg.spacing > 0.0 && cfg.jitter >= 0.0 && cfg.jitter < cfg.spacing / 2.0) {
        return Err(Error::invalid("jitter must be below half the grid spacing"));
    }
    if !(0.0..=1.0).contains(&cfg.extra_edge_prob) {
        return Err(Error::invalid("extra edge probability must lie in [0, 1]"));
    }
    let mut r = rng::stream(seed, "world.layout");
    let side = (cfg.nodes as f64).sqrt().ceil() as usize + 2;
    if side.checked_mul(side).is_none() {
        return Err(Error::invalid("node count too large"));
    }
    // grow a 4-connected cluster of cells from the grid centre
    let mut cells: Vec<(usize, usize)> = vec![(side / 2, side / 2)];
    let mut taken = vec![false; side * side];
    taken[(side / 2) * side + side / 2] = true;
    while cells.len() < cfg.nodes {
        let mut frontier: Vec<(usize, usize)> = Vec::new();
        for &(cx, cy) in &cells {
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                if nx < 0 || ny < 0 || nx >= side as i64 || ny >= side as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !taken[ny * side + nx] && !frontier.contains(&(nx, ny)) {
                    frontier.push((nx, ny));
                }
            }
        }
        let next = *frontier
            .get(r.random_range(0..frontier.len().max(1)))
            .ok_or_else(|| Error::invalid("grid has no room for more nodes"))?;
        taken[next.1 * side + next.0] = true;
        cells.push(next);
    }
    let nodes: Vec<Node> = cells
        .iter()
        .enumerate()
        .map(|(id, &(cx, cy))| {
            let jx = r.random_range(-cfg.jitter..=cfg.jitter);
            let jy = r.random_range(-cfg.jitter..=cfg.jitter);
            Node {
                id,
                pos: [cx as f64 * cfg.spacing + jx, cy as f64 * cfg.spacing + jy, 0.0],
                scene: SceneId(r.random_range(0..SCENE_COUNT)),
            }
        })
        .collect();
    let mut adjacent: Vec<(usize, usize)> = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let (a, b) = (cells[i], cells[j]);
            if a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1 {
                adjacent.push((i, j));
            }
        }
    }
    adjacent.shuffle(&mut r);
    let mut parent: Vec<usize> = (0..cells.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut edges = Vec::new();
    for &(i, j) in &adjacent {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
            edges.push((i, j));
        } else if r.random_bool(cfg.extra_edge_prob) {
            edges.push((i, j));
        }
    }
    edges.sort_unstable();
    let graph = WorldGraph::new(nodes, edges)?;
    let panoramas = (0..graph.len())
        .map(|n| render_panorama(&graph, n, &cfg.render))
        .collect::<Result<Vec<_>>>()?;
    let episodes = make_episodes(
        &graph,
        &EpisodeConfig {
            count: cfg.episodes,
            ..EpisodeConfig::default()
        },
        &mut rng::stream(seed, "world.episodes"),
    )?;
    Ok(World {
        graph,
        panoramas,
        episodes,
    })
}
