use rand::Rng;

use super::graph::{NodeId, WorldGraph};
use crate::error::Result;
use crate::pano::{band_top, Panorama, ELEVATIONS, HEADINGS};
use crate::rng;
use crate::scene::SceneId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 96,
            height: 24,
            channels: 3,
            noise: 0.03,
        }
    }
}

/// Heading index (30° sectors, 0 = +x axis, counter-clockwise) of the
/// direction from `a` to `b`.
pub fn heading_index_towards(g: &WorldGraph, a: NodeId, b: NodeId) -> usize {
    let (pa, pb) = (g.nodes()[a].pos, g.nodes()[b].pos);
    let deg = (pb[1] - pa[1]).atan2(pb[0] - pa[0]).to_degrees().rem_euclid(360.0);
    ((deg / 30.0).round() as usize) % HEADINGS
}

/// Scene shown in a sub-view: the horizon view facing a neighbour shows
/// the nearest such neighbour's scene, every other view the node's own.
pub fn view_scene(g: &WorldGraph, node: NodeId, heading: usize, elevation: usize) -> SceneId {
    if elevation == 1 {
        let facing = g
            .neighbors(node)
            .iter()
            .filter(|(n, _)| heading_index_towards(g, node, *n) == heading)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((n, _)) = facing {
            return g.nodes()[*n].scene;
        }
    }
    g.nodes()[node].scene
}

/// Procedural panorama of one node: each sub-view is its scene's texture
/// in its scene's colour, shaded by elevation, with seeded sensor noise.
pub fn render_panorama(g: &WorldGraph, node: NodeId, cfg: &RenderConfig) -> Result<Panorama> {
    let mut p = Panorama::zeros(cfg.width, cfg.height, cfg.channels)?;
    let (vw, vh) = (p.view_width(), p.view_height());
    let pos = g.node(node)?.pos;
    let seed = pos.iter().fold(node as u64, |h, v| h.rotate_left(17) ^ v.to_bits());
    let mut r = rng::stream(seed, "render");
    let gain = r.random_range(0.9..1.1);
    let (w, c) = (cfg.width, cfg.channels);
    for e in 0..ELEVATIONS {
        let shade = [0.8, 1.0, 0.9][e];
        let top = band_top(cfg.height, e);
        for h in 0..HEADINGS {
            let scene = view_scene(g, node, h, e);
            let color = scene.color();
            let tex = scene.texture();
            for y in top..top + vh {
                for x in h * vw..(h + 1) * vw {
                    let v = 0.3 + 0.7 * tex.pattern(x, y);
                    for ch in 0..c {
                        let noise = cfg.noise * rng::normal(&mut r);
                        p.pixels_mut()[(y * w + x) * c + ch] =
                            (shade * gain * color[ch % 3] * v + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(p)
}
