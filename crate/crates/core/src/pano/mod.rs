//! Panorama geometry: sub-view partitioning, masks, outpainting windows.

mod generate;
mod mask;
mod window;

pub use generate::{augment_view, generate_panorama, Canvas};
pub use mask::{make_mask, Mask, MaskSpec, MaskStrategy};
pub use window::{outpaint_schedule, Direction, Placement, WindowSchedule};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const HEADINGS: usize = 12;
pub const ELEVATIONS: usize = 3;
pub const VIEW_COUNT: usize = HEADINGS * ELEVATIONS;

/// Row-major `height × width × channels` image with a wrapping horizontal
/// axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Panorama {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("panorama dimensions must be positive"));
        }
        if width % HEADINGS != 0 || height % ELEVATIONS != 0 {
            return Err(Error::invalid(format!(
                "panorama {width}x{height} must have width divisible by {HEADINGS} and height by {ELEVATIONS}"
            )));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::invalid("panorama too large"))?;
        if pixels.len() != n {
            return Err(Error::shape(
                "panorama",
                format!("{} values for {width}x{height}x{channels}", pixels.len()),
            ));
        }
        Ok(Panorama {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn view_width(&self) -> usize {
        self.width / HEADINGS
    }

    pub fn view_height(&self) -> usize {
        self.height / ELEVATIONS
    }

    /// Pixel `(y, x)` channel `ch`, with `x` taken modulo the width.
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.width + x % self.width) * self.channels + ch]
    }

    pub fn clamped(mut self) -> Self {
        for v in self.pixels.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Copies an `h × w` crop starting at `(top, left)`; columns wrap.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        if top + h > self.height {
            return Err(Error::shape(
                "crop",
                format!("rows {top}..{} exceed {}", top + h, self.height),
            ));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            for x in left..left + w {
                let at = (y * self.width + x % self.width) * c;
                out.extend_from_slice(&self.pixels[at..at + c]);
            }
        }
        Tensor::new(vec![h, w, c], out)
    }

    /// Writes an `h × w × c` tensor at `(top, left)`; columns wrap.
    pub fn paste(&mut self, top: usize, left: usize, img: &Tensor) -> Result<()> {
        let (h, w, c) = image_dims(img)?;
        if c != self.channels || top + h > self.height {
            return Err(Error::shape(
                "paste",
                format!(
                    "{h}x{w}x{c} at row {top} into {}x{}x{}",
                    self.height, self.width, self.channels
                ),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let dst = ((top + y) * self.width + (left + x) % self.width) * c;
                let src = (y * w + x) * c;
                self.pixels[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
            }
        }
        Ok(())
    }
}

pub(crate) fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape("image", format!("expected H x W x C, got {s:?}"))),
    }
}

/// One perspective crop. Heading is `30°·heading_index`; elevation index
/// 0, 1, 2 means −30°, 0°, +30°, so index 0 is the bottom band.
#[derive(Clone, Debug, PartialEq)]
pub struct SubView {
    pub heading_index: usize,
    pub elevation_index: usize,
    pub image: Tensor,
}

impl SubView {
    pub fn heading_degrees(&self) -> f64 {
        30.0 * self.heading_index as f64
    }

    pub fn elevation_degrees(&self) -> f64 {
        30.0 * self.elevation_index as f64 - 30.0
    }

    /// Position in the `(elevation, heading)` order, `0..36`.
    pub fn index(&self) -> usize {
        self.elevation_index * HEADINGS + self.heading_index
    }
}

/// Top row of the band holding `elevation_index`.
pub fn band_top(height: usize, elevation_index: usize) -> usize {
    (ELEVATIONS - 1 - elevation_index) * (height / ELEVATIONS)
}

pub fn partition(p: &Panorama) -> Result<Vec<SubView>> {
    let (vw, vh) = (p.view_width(), p.view_height());
    let mut out = Vec::with_capacity(VIEW_COUNT);
    for e in 0..ELEVATIONS {
        for h in 0..HEADINGS {
            out.push(SubView {
                heading_index: h,
                elevation_index: e,
                image: p.crop(band_top(p.height, e), h * vw, vh, vw)?,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`partition`]. Views may come in any order but must cover
/// every `(elevation, heading)` slot exactly once.
pub fn stitch(views: &[SubView]) -> Result<Panorama> {
    if views.len() != VIEW_COUNT {
        return Err(Error::invalid(format!("need {VIEW_COUNT} views, got {}", views.len())));
    }
    let (vh, vw, c) = image_dims(&views[0].image)?;
    let mut seen = [false; VIEW_COUNT];
    let mut p = Panorama::zeros(vw * HEADINGS, vh * ELEVATIONS, c)?;
    for v in views {
        if v.heading_index >= HEADINGS || v.elevation_index >= ELEVATIONS {
            return Err(Error::invalid("view index out of range"));
        }
        if v.image.shape() != [vh, vw, c] {
            return Err(Error::shape("stitch", "views differ in shape"));
        }
        if std::mem::replace(&mut seen[v.index()], true) {
            return Err(Error::invalid(format!("duplicate view {}", v.index())));
        }
        p.paste(band_top(p.height, v.elevation_index), v.heading_index * vw, &v.image)?;
    }
    Ok(p)
}
