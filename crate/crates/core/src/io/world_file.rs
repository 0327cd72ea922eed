use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{decode_panorama, encode_panorama, parse_episodes, read_text, to_jsonl, write_atomic};
use crate::error::{Error, Result};
use crate::pano::Panorama;
use crate::scene::SceneId;
use crate::world::{Node, World, WorldGraph};

pub const WORLD_FILE: &str = "world.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: usize,
    pub pos: [f64; 3],
    /// Panorama file relative to the world file.
    pub pano: String,
    pub scene: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<[usize; 2]>,
}

impl WorldFile {
    pub fn from_world(w: &World) -> Self {
        WorldFile {
            nodes: w
                .graph
                .nodes()
                .iter()
                .map(|n| NodeEntry {
                    id: n.id,
                    pos: n.pos,
                    pano: pano_name(n.id),
                    scene: n.scene.label().to_string(),
                })
                .collect(),
            edges: w.graph.edges().iter().map(|(a, b)| [*a, *b]).collect(),
        }
    }

    pub fn graph(&self) -> Result<WorldGraph> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let scene = SceneId::from_label(&n.scene)
                    .ok_or_else(|| Error::format(format!("node {} has unknown scene {:?}", n.id, n.scene)))?;
                check_relative(&n.pano)?;
                Ok(Node {
                    id: n.id,
                    pos: n.pos,
                    scene,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = self.edges.iter().map(|[a, b]| (*a, *b)).collect();
        WorldGraph::new(nodes, edges).map_err(|e| Error::format(e.to_string()))
    }
}

fn pano_name(id: usize) -> String {
    format!("panos/node_{id:03}.pan")
}

fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    if p.is_empty() || !path.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(Error::format(format!(
            "panorama path {p:?} must be relative and stay inside the world directory"
        )));
    }
    Ok(())
}

pub fn parse_world(text: &str) -> Result<WorldFile> {
    serde_json::from_str(text).map_err(|e| Error::format(format!("world: {e}")))
}

/// Writes `world.json`, one panorama per node and `episodes.jsonl` under
/// `dir`.
pub fn write_world(dir: &Path, w: &World) -> Result<()> {
    let file = WorldFile::from_world(w);
    for (entry, p) in file.nodes.iter().zip(&w.panoramas) {
        write_atomic(&dir.join(&entry.pano), &encode_panorama(p))?;
    }
    write_atomic(&dir.join(EPISODES_FILE), to_jsonl(&w.episodes)?.as_bytes())?;
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    write_atomic(&dir.join(WORLD_FILE), json.as_bytes())
}

/// Reads a world file, its panoramas and the episodes at `episodes` (the
/// sibling `episodes.jsonl` when `None`; a missing default file yields no
/// episodes).
pub fn read_world(world: &Path, episodes: Option<&Path>) -> Result<World> {
    let file = parse_world(&read_text(world)?)?;
    let graph = file.graph()?;
    let dir = world.parent().unwrap_or(Path::new("."));
    let mut panoramas: Vec<Panorama> = Vec::with_capacity(file.nodes.len());
    let mut entries: Vec<&NodeEntry> = file.nodes.iter().collect();
    entries.sort_by_key(|n| n.id);
    for n in entries {
        panoramas.push(decode_panorama(&std::fs::read(dir.join(&n.pano))?)?);
    }
    let ep_path: PathBuf = episodes
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(EPISODES_FILE));
    let episodes = if episodes.is_none() && !ep_path.exists() {
        Vec::new()
    } else {
        parse_episodes(&read_text(&ep_path)?)?
    };
    for e in &episodes {
        e.validate(&graph).map_err(|err| Error::format(err.to_string()))?;
    }
    Ok(World {
        graph,
        panoramas,
        episodes,
    })
}
