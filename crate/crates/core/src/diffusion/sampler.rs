use rand::Rng;

use super::model::EpsModel;
use super::schedule::{noise_with, NoiseSchedule};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pano::Mask;
use crate::rng;

/// Posterior mean of one ancestral step:
/// `(1/√α_t)·(z_t − β_t/√(1−ᾱ_t)·ε̂)`.
pub fn reverse_mean(z_t: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Vec<f64> {
    let (alpha, beta, ab) = (s.alpha()[t], s.beta()[t], s.alpha_bar()[t]);
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    z_t.iter().zip(eps).map(|(z, e)| inv * (z - k * e)).collect()
}

fn step<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    z: Vec<f64>,
    shape: &[usize],
    t: usize,
    cond: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let zt = Tensor::new(shape.to_vec(), z)?;
    let eps = model.predict_eps(&zt, t, cond)?;
    if eps.shape() != shape {
        return Err(Error::shape(
            "sample",
            format!("model returned {:?} for {shape:?}", eps.shape()),
        ));
    }
    let mut next = reverse_mean(zt.data(), eps.data(), t, schedule);
    if t > 0 {
        let sigma = schedule.beta()[t].sqrt();
        for v in next.iter_mut() {
            *v += sigma * rng::normal(rng);
        }
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sample" });
    }
    Ok(next)
}

/// Ancestral sampling from pure noise, `t = T−1 … 0`, `σ_t = √β_t`, no
/// noise on the final step.
pub fn sample<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cond: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::shape("sample", format!("empty shape {shape:?}")));
    }
    let z = rng::normal_vec(rng, n);
    run_from(model, schedule, z, shape, cond, rng)
}

/// Reverse chain starting from a given `z_{T}`.
pub fn run_from<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    mut z: Vec<f64>,
    shape: &[usize],
    cond: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    for t in (0..schedule.steps()).rev() {
        z = step(model, schedule, z, shape, t, cond, rng)?;
    }
    Tensor::new(shape.to_vec(), z)
}

/// Mask-conditioned sampling. Latents are `H × W × C`; `mask` is `H × W`
/// with `true` marking pixels to generate. Before every model call the
/// known pixels are replaced by the source noised to the current step, and
/// the final output equals the source exactly where the mask is clear.
///
/// Noise for the known region is drawn after the step noise and only for
/// known pixels, so an all-masked call consumes the same random stream as
/// [`sample`] and returns the same latent.
pub fn inpaint_sample<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    source: &Tensor,
    mask: &Mask,
    cond: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    let shape = source.shape().to_vec();
    if shape.len() != 3 || shape[0] != mask.height() || shape[1] != mask.width() {
        return Err(Error::shape(
            "inpaint_sample",
            format!("source {shape:?} vs mask {}x{}", mask.height(), mask.width()),
        ));
    }
    if mask.masked_count() == 0 {
        return Ok(source.clone());
    }
    let channels = shape[2];
    let known: Vec<usize> = (0..source.numel()).filter(|i| !mask.data()[i / channels]).collect();
    let reimpose = |z: &mut [f64], t: Option<usize>, rng: &mut R| match t {
        Some(t) => {
            let ab = schedule.alpha_bar()[t];
            for &i in &known {
                let e = rng::normal(rng);
                z[i] = noise_with(&[source.data()[i]], &[e], ab)[0];
            }
        }
        None => {
            for &i in &known {
                z[i] = source.data()[i];
            }
        }
    };
    let steps = schedule.steps();
    let mut z = rng::normal_vec(rng, source.numel());
    reimpose(&mut z, Some(steps - 1), rng);
    for t in (0..steps).rev() {
        z = step(model, schedule, z, &shape, t, cond, rng)?;
        reimpose(&mut z, t.checked_sub(1), rng);
    }
    Tensor::new(shape, z)
}
