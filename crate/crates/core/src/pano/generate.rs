use rand::Rng;

use super::{image_dims, Mask, Panorama, WindowSchedule};
use crate::autodiff::Tensor;
use crate::diffusion::{inpaint_sample, sample, EpsModel, NoiseSchedule};
use crate::error::{Error, Result};

/// Unclamped latent panorama plus a record of which pixels are written.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub latent: Panorama,
    pub written: Vec<bool>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Ok(Canvas {
            latent: Panorama::zeros(width, height, channels)?,
            written: vec![false; width * height],
        })
    }

    fn window_mask(&self, windows: &WindowSchedule, i: usize) -> Result<Mask> {
        let s = windows.size;
        let cells = windows.cells(i);
        Mask::new(s, s, cells.iter().map(|c| !self.written[*c]).collect())
    }

    /// Fills the unwritten part of window `i` and marks it written.
    pub fn fill_window<M: EpsModel + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        noise: &NoiseSchedule,
        windows: &WindowSchedule,
        i: usize,
        cond: &[f64],
        rng: &mut R,
    ) -> Result<()> {
        let p = windows.placements[i];
        let s = windows.size;
        let mask = self.window_mask(windows, i)?;
        let unknown = mask.masked_count();
        if unknown == 0 {
            return Ok(());
        }
        let shape = [s, s, self.latent.channels()];
        let out = if unknown == s * s {
            sample(model, noise, &shape, cond, rng)?
        } else {
            let source = self.latent.crop(p.row, p.col, s, s)?;
            inpaint_sample(model, noise, &source, &mask, cond, rng)?
        };
        let c = shape[2];
        for (k, cell) in windows.cells(i).into_iter().enumerate() {
            if mask.data()[k] {
                self.latent.pixels_mut()[cell * c..cell * c + c].copy_from_slice(&out.data()[k * c..k * c + c]);
                self.written[cell] = true;
            }
        }
        Ok(())
    }
}

/// Runs the outpainting schedule window by window. `conds[i]` conditions
/// window `i`. Each window generates only pixels no earlier window wrote;
/// the result is clamped to `[0, 1]`.
pub fn generate_panorama<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    noise: &NoiseSchedule,
    windows: &WindowSchedule,
    channels: usize,
    conds: &[Vec<f64>],
    rng: &mut R,
) -> Result<Panorama> {
    if conds.len() != windows.len() {
        return Err(Error::invalid(format!(
            "{} conditioning vectors for {} windows",
            conds.len(),
            windows.len()
        )));
    }
    let mut canvas = Canvas::new(windows.width, windows.height, channels)?;
    for (i, cond) in conds.iter().enumerate() {
        canvas.fill_window(model, noise, windows, i, cond, rng)?;
    }
    Ok(canvas.latent.clamped())
}

/// Regenerates the masked part of a view; unmasked pixels are returned
/// unchanged and generated ones clamped to `[0, 1]`.
pub fn augment_view<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    noise: &NoiseSchedule,
    view: &Tensor,
    mask: &Mask,
    cond: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    let (_, _, c) = image_dims(view)?;
    let mut out = inpaint_sample(model, noise, view, mask, cond, rng)?;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.data()[i / c] {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
