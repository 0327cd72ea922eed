use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneId;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub pos: [f64; 3],
    pub scene: SceneId,
}

/// Connected undirected graph with Euclidean edge weights. Node ids are
/// `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldGraph {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    adj: Vec<Vec<(NodeId, f64)>>,
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d: [f64; 3] = std::array::from_fn(|i| a[i] - b[i]);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

impl WorldGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<(NodeId, NodeId)>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Graph(format!("node at position {i} has id {}", node.id)));
            }
            if node.pos.iter().any(|v| !v.is_finite()) {
                return Err(Error::Graph(format!("node {i} has a non-finite position")));
            }
            if node.scene.0 >= crate::scene::SCENE_COUNT {
                return Err(Error::Graph(format!("node {i} has unknown scene {}", node.scene.0)));
            }
        }
        let mut adj = vec![Vec::new(); n];
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) references a missing node")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
            }
            let w = distance(&nodes[a].pos, &nodes[b].pos);
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|(id, _)| *id);
        }
        let g = WorldGraph { nodes, edges, adj };
        let reach = g.dijkstra(0).dist.iter().filter(|d| d.is_finite()).count();
        if reach != n {
            return Err(Error::Graph(format!(
                "graph is disconnected: {reach} of {n} nodes reachable"
            )));
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Graph(format!("node {id} not in graph")))
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    /// Neighbours in ascending id order with edge weights.
    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, f64)] {
        &self.adj[id]
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adj.get(a)?.iter().find(|(n, _)| *n == b).map(|(_, w)| *w)
    }

    /// Single-source shortest paths.
    pub fn dijkstra(&self, source: NodeId) -> Dijkstra {
        #[derive(PartialEq)]
        struct Item(f64, NodeId);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        let mut dist = vec![f64::INFINITY; self.len()];
        let mut heap = BinaryHeap::new();
        if source < self.len() {
            dist[source] = 0.0;
            heap.push(Item(0.0, source));
        }
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Item(nd, v));
                }
            }
        }
        Dijkstra { source, dist }
    }

    /// Length of the oracle path from `a` to `b`, summed from `a`.
    pub fn geodesic(&self, a: NodeId, b: NodeId) -> Result<f64> {
        self.path_length(&self.shortest_path(a, b)?)
    }

    /// Next node on a minimum-weight path from `current` to `goal`, or
    /// `None` (STOP) when already there. Ties go to the smallest id.
    pub fn oracle_action(&self, current: NodeId, goal: NodeId) -> Result<Option<NodeId>> {
        self.node(current)?;
        self.node(goal)?;
        if current == goal {
            return Ok(None);
        }
        let to_goal = self.dijkstra(goal);
        to_goal.next_hop(self, current).map(Some)
    }

    /// The node sequence produced by following [`WorldGraph::oracle_action`].
    pub fn shortest_path(&self, start: NodeId, goal: NodeId) -> Result<Vec<NodeId>> {
        self.node(start)?;
        self.node(goal)?;
        let to_goal = self.dijkstra(goal);
        let mut path = vec![start];
        let mut cur = start;
        while cur != goal {
            cur = to_goal.next_hop(self, cur)?;
            path.push(cur);
            if path.len() > self.len() {
                return Err(Error::Graph("shortest path did not terminate".into()));
            }
        }
        Ok(path)
    }

    /// Sum of edge weights along `path`; errors on a non-edge step.
    pub fn path_length(&self, path: &[NodeId]) -> Result<f64> {
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self
                .weight(w[0], w[1])
                .ok_or_else(|| Error::Graph(format!("{} and {} are not adjacent", w[0], w[1])))?;
        }
        Ok(total)
    }
}

/// Distances from (equivalently, to) one node.
#[derive(Clone, Debug, PartialEq)]
pub struct Dijkstra {
    pub source: NodeId,
    pub dist: Vec<f64>,
}

impl Dijkstra {
    /// Neighbour of `from` minimising `w + dist`, smallest id among
    /// candidates equal within a relative 1e-12.
    pub fn next_hop(&self, g: &WorldGraph, from: NodeId) -> Result<NodeId> {
        if !self.dist[from].is_finite() {
            return Err(Error::Graph(format!(
                "nodes {from} and {} are disconnected",
                self.source
            )));
        }
        let best = g
            .neighbors(from)
            .iter()
            .map(|(n, w)| w + self.dist[*n])
            .fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * best.max(1.0);
        g.neighbors(from)
            .iter()
            .find(|(n, w)| w + self.dist[*n] <= best + tol)
            .map(|(n, _)| *n)
            .ok_or_else(|| Error::Graph(format!("node {from} has no neighbours")))
    }
}
