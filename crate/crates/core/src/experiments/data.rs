use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::conditioning::{detokenize, synth_caption, tokenize, ViewMeta, Vocabulary};
use crate::diffusion::{Generator, TrainPair};
use crate::error::{Error, Result};
use crate::io::{decode_panorama, CaptionPair, ImageRef, WorldFile};
use crate::pano::{
    augment_view, band_top, generate_panorama, make_mask, outpaint_schedule, partition, MaskSpec, Panorama, ELEVATIONS,
    HEADINGS,
};
use crate::world::{view_scene, NodeId, Observation, Provenance, World, WorldGraph};

pub fn view_caption(g: &WorldGraph, node: NodeId, heading: usize, elevation: usize) -> Result<Vec<String>> {
    let scene = view_scene(g, node, heading, elevation);
    synth_caption(Some(&ViewMeta { scene }))
}

/// One pair per sub-view of every node, referencing the panorama paths a
/// written world uses.
pub fn caption_pairs(w: &World) -> Result<Vec<CaptionPair>> {
    let file = WorldFile::from_world(w);
    let mut out = Vec::with_capacity(w.graph.len() * ELEVATIONS * HEADINGS);
    for entry in &file.nodes {
        for e in 0..ELEVATIONS {
            for h in 0..HEADINGS {
                let image = ImageRef {
                    path: entry.pano.clone(),
                    heading: h,
                    elevation: e,
                };
                out.push(CaptionPair {
                    image: image.format(),
                    caption: detokenize(&view_caption(&w.graph, entry.id, h, e)?),
                });
            }
        }
    }
    Ok(out)
}

/// Training pairs straight from an in-memory world.
pub fn world_train_pairs(w: &World, vocab: &Vocabulary) -> Result<Vec<TrainPair>> {
    let mut out = Vec::new();
    for (node, p) in w.panoramas.iter().enumerate() {
        for v in partition(p)? {
            let caption = view_caption(&w.graph, node, v.heading_index, v.elevation_index)?;
            out.push(TrainPair {
                image: v.image,
                caption: vocab.encode(&caption)?,
            });
        }
    }
    Ok(out)
}

/// Resolves caption pairs against panorama files under `base`.
pub fn pairs_to_train(pairs: &[CaptionPair], base: &Path, vocab: &Vocabulary) -> Result<Vec<TrainPair>> {
    let mut cache: HashMap<String, Panorama> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let r = ImageRef::parse(&p.image)?;
        if !cache.contains_key(&r.path) {
            let pano = decode_panorama(&std::fs::read(base.join(&r.path))?)?;
            cache.insert(r.path.clone(), pano);
        }
        let pano = &cache[&r.path];
        let view = partition(pano)?
            .into_iter()
            .find(|v| v.heading_index == r.heading && v.elevation_index == r.elevation)
            .ok_or_else(|| Error::format(format!("no view for {}", p.image)))?;
        out.push(TrainPair {
            image: view.image,
            caption: vocab.encode(&tokenize(&p.caption))?,
        });
    }
    Ok(out)
}

/// Mean masked fraction over the views a bank was generated from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationStats {
    pub views: usize,
    pub mask_fraction: f64,
}

/// Regenerates every sub-view of every node by inpainting under `spec`'s
/// strategy, conditioned on the view's caption. Random strategies draw a
/// fresh mask seed per view from `rng`.
pub fn generated_observations<R: Rng + ?Sized>(
    gen: &Generator,
    w: &World,
    spec: MaskSpec,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(Vec<Observation>, GenerationStats)> {
    let schedule = gen.schedule()?;
    let mut out = Vec::with_capacity(w.graph.len());
    let (mut masked, mut total) = (0usize, 0usize);
    for (node, p) in w.panoramas.iter().enumerate() {
        let mut views = Vec::with_capacity(ELEVATIONS * HEADINGS);
        for v in partition(p)? {
            let caption = view_caption(&w.graph, node, v.heading_index, v.elevation_index)?;
            let cond = gen.condition(&vocab.encode(&caption)?)?;
            let shape = v.image.shape().to_vec();
            let mask = make_mask(
                shape[0],
                shape[1],
                &MaskSpec {
                    seed: rng.random(),
                    ..spec
                },
            )?;
            masked += mask.masked_count();
            total += shape[0] * shape[1];
            views.push(augment_view(gen, &schedule, &v.image, &mask, &cond, rng)?);
        }
        out.push(Observation::new(node, views, Provenance::Generated)?);
    }
    Ok((
        out,
        GenerationStats {
            views: w.graph.len() * ELEVATIONS * HEADINGS,
            mask_fraction: masked as f64 / total.max(1) as f64,
        },
    ))
}

/// Outpaints a full panorama for `node` window by window, conditioning each
/// window on the caption of the sub-view under its centre.
pub fn outpaint_node<R: Rng + ?Sized>(
    gen: &Generator,
    w: &World,
    node: NodeId,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Panorama> {
    let p = w
        .panoramas
        .get(node)
        .ok_or_else(|| Error::Graph(format!("node {node} has no panorama")))?;
    let d = gen.cfg.denoiser;
    if d.height != d.width || d.channels != p.channels() {
        return Err(Error::invalid(
            "outpainting needs a square generator matching the panorama channels",
        ));
    }
    let windows = outpaint_schedule(p.width(), p.height(), d.height)?;
    let (vw, vh) = (p.view_width(), p.view_height());
    let conds = windows
        .placements
        .iter()
        .map(|pl| {
            let x = (pl.col + d.width / 2) % p.width();
            let y = pl.row + d.height / 2;
            let heading = (x / vw).min(HEADINGS - 1);
            let elevation = (0..ELEVATIONS)
                .find(|&e| (band_top(p.height(), e)..band_top(p.height(), e) + vh).contains(&y))
                .unwrap_or(1);
            gen.condition(&vocab.encode(&view_caption(&w.graph, node, heading, elevation)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    generate_panorama(gen, &gen.schedule()?, &windows, p.channels(), &conds, rng)
}
