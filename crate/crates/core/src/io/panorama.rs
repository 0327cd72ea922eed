use crate::error::{Error, Result};
use crate::pano::Panorama;

pub const PANORAMA_MAGIC: &[u8; 4] = b"PAN1";

const MAX_SIDE: usize = 1 << 16;

/// Magic, width, height, channels (u32 LE), then f32 LE pixels in row-major
/// order, clamped to `[0, 1]`.
pub fn encode_panorama(p: &Panorama) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * p.pixels().len());
    out.extend_from_slice(PANORAMA_MAGIC);
    for d in [p.width(), p.height(), p.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in p.pixels() {
        out.extend_from_slice(&(v.clamp(0.0, 1.0) as f32).to_le_bytes());
    }
    out
}

pub fn decode_panorama(bytes: &[u8]) -> Result<Panorama> {
    if bytes.len() < 16 || &bytes[..4] != PANORAMA_MAGIC {
        return Err(Error::format("not a panorama file"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    if w == 0 || h == 0 || c == 0 || w > MAX_SIDE || h > MAX_SIDE || c > 16 {
        return Err(Error::format(format!("bad panorama dimensions {w}x{h}x{c}")));
    }
    let n = w * h * c;
    if bytes.len() - 16 != 4 * n {
        return Err(Error::format(format!(
            "panorama {w}x{h}x{c} needs {} data bytes, found {}",
            4 * n,
            bytes.len() - 16
        )));
    }
    let pixels: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format("panorama pixels must lie in [0, 1]"));
    }
    Panorama::new(w, h, c, pixels)
}
