use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Binary `height × width` grid; `true` marks a pixel to generate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} cells for {height}x{width}", data.len()),
            ));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, masked: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![masked; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, masked: bool) {
        self.data[y * self.width + x] = masked;
    }

    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|m| **m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.masked_count() as f64 / self.data.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    /// Small random rectangles covering 10–50% of the area.
    Srm,
    /// Large random rectangles covering 50–90% of the area.
    Erm,
    /// Exactly one half of the image.
    Him,
    /// Everything except a centered square.
    Prm,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Srm,
        MaskStrategy::Erm,
        MaskStrategy::Him,
        MaskStrategy::Prm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Srm => "srm",
            MaskStrategy::Erm => "erm",
            MaskStrategy::Him => "him",
            MaskStrategy::Prm => "prm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown mask strategy {s:?}")))
    }

    /// Declared masked-fraction bounds.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            MaskStrategy::Srm => (0.10, 0.50),
            MaskStrategy::Erm => (0.50, 0.90),
            MaskStrategy::Him => (0.5, 0.5),
            MaskStrategy::Prm => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    /// Side of the preserved square for PRM; `None` means a quarter of the
    /// smaller image side.
    pub crop: Option<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy, seed: u64) -> Self {
        MaskSpec {
            strategy,
            crop: None,
            seed,
        }
    }

    pub fn with_crop(mut self, side: usize) -> Self {
        self.crop = Some(side);
        self
    }
}

pub fn make_mask(height: usize, width: usize, spec: &MaskSpec) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask needs a nonempty grid"));
    }
    let mut r = rng::from_seed(spec.seed);
    match spec.strategy {
        MaskStrategy::Srm | MaskStrategy::Erm => {
            let (lo, hi) = spec.strategy.bounds();
            random_rects(height, width, lo, hi, &mut r)
        }
        MaskStrategy::Him => half(height, width, r.random_bool(0.5)),
        MaskStrategy::Prm => {
            let side = spec.crop.unwrap_or((height.min(width) / 4).max(1));
            center_keep(height, width, side)
        }
    }
}

/// Drops random rectangles until a masked fraction drawn from `[lo, hi]` is
/// reached, never overshooting; single pixels close any remaining gap.
fn random_rects<R: Rng + ?Sized>(h: usize, w: usize, lo: f64, hi: f64, r: &mut R) -> Result<Mask> {
    let n = h * w;
    let min = (lo * n as f64 - 1e-9).ceil() as usize;
    let max = (hi * n as f64 + 1e-9).floor() as usize;
    if min > max || max == 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} grid cannot hold a masked fraction in [{lo}, {hi}]"
        )));
    }
    let target = ((r.random_range(lo..=hi) * n as f64).round() as usize).clamp(min, max);
    let mut mask = Mask::filled(h, w, false);
    let mut count = 0;
    for _ in 0..64 {
        if count == target {
            break;
        }
        let rh = r.random_range(1..=h.div_ceil(2));
        let rw = r.random_range(1..=w.div_ceil(2));
        let top = r.random_range(0..=h - rh);
        let left = r.random_range(0..=w - rw);
        let fresh = (top..top + rh)
            .flat_map(|y| (left..left + rw).map(move |x| (y, x)))
            .filter(|&(y, x)| !mask.get(y, x))
            .count();
        if count + fresh > target {
            continue;
        }
        for y in top..top + rh {
            for x in left..left + rw {
                mask.set(y, x, true);
            }
        }
        count += fresh;
    }
    while count < target {
        let (y, x) = (r.random_range(0..h), r.random_range(0..w));
        if !mask.get(y, x) {
            mask.set(y, x, true);
            count += 1;
        }
    }
    Ok(mask)
}

fn half(h: usize, w: usize, flip: bool) -> Result<Mask> {
    let mut mask = Mask::filled(h, w, false);
    if w % 2 == 0 {
        let cols = if flip { w / 2..w } else { 0..w / 2 };
        for y in 0..h {
            for x in cols.clone() {
                mask.set(y, x, true);
            }
        }
    } else if h % 2 == 0 {
        let rows = if flip { h / 2..h } else { 0..h / 2 };
        for y in rows {
            for x in 0..w {
                mask.set(y, x, true);
            }
        }
    } else {
        return Err(Error::invalid(format!("{h}x{w} grid has no exact half")));
    }
    Ok(mask)
}

fn center_keep(h: usize, w: usize, side: usize) -> Result<Mask> {
    if side == 0 || side > h.min(w) {
        return Err(Error::invalid(format!("preserved crop {side} does not fit {h}x{w}")));
    }
    let mut mask = Mask::filled(h, w, true);
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    for y in top..top + side {
        for x in left..left + side {
            mask.set(y, x, false);
        }
    }
    Ok(mask)
}
