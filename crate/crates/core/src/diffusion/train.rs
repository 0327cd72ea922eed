use rand::seq::IndexedRandom;
use rand::Rng;

use super::model::{Generator, LatentCodec, TapeEps};
use super::schedule::{forward_noise, NoiseSchedule};
use crate::autodiff::{value_and_grad, Binding, ParamStore, Tensor, Var};
use crate::conditioning::TokenId;
use crate::error::{Error, Result};
use crate::rng;

/// One (latent, caption) training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub image: Tensor,
    pub caption: Vec<TokenId>,
}

/// `mean_i ‖ε_i − ε̂(z_t, E_txt(y_i), t_i)‖² / n` over a batch, with a
/// fresh `t ~ Uniform{0..T−1}` and `ε ~ N(0, I)` per example.
pub fn denoise_loss<'t, M: TapeEps + ?Sized, R: Rng + ?Sized>(
    model: &M,
    codec: LatentCodec,
    b: &Binding<'t>,
    batch: &[&TrainPair],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::invalid("denoise_loss needs a nonempty batch"));
    }
    let mut total: Option<Var<'t>> = None;
    for pair in batch {
        let latent = codec.encode(&pair.image);
        let t = rng.random_range(0..schedule.steps());
        let eps = Tensor::new(latent.shape().to_vec(), rng::normal_vec(rng, latent.numel()))?;
        let noised = forward_noise(&latent, t, &eps, schedule)?;
        let pred = model.eps_on_tape(b, &noised.z_t, t, &pair.caption)?;
        let l = pred.mse(&model.target_layout(&eps)?)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    total.expect("batch is nonempty").scale(1.0 / batch.len() as f64)
}

/// Plain SGD on the trainable parameters of `store`; the model reads its
/// weights through the binding, so only its configuration is used here.
/// Returns the loss of every iteration.
#[allow(clippy::too_many_arguments)]
pub fn fit<M, R>(
    model: &M,
    codec: LatentCodec,
    store: &mut ParamStore,
    data: &[TrainPair],
    schedule: &NoiseSchedule,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    M: TapeEps + ?Sized,
    R: Rng + ?Sized,
{
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut trace = Vec::with_capacity(iterations);
    for iter in 0..iterations {
        let batch: Vec<&TrainPair> = (0..batch_size).map(|_| data.choose(rng).expect("nonempty")).collect();
        let (loss, grads) =
            value_and_grad(store, |b| denoise_loss(model, codec, b, &batch, schedule, rng)).map_err(|e| match e {
                Error::NonFinite { op } => Error::Numeric(format!("non-finite {op} at iteration {iter}")),
                other => other,
            })?;
        store.sgd_step(&grads, lr)?;
        trace.push(loss);
    }
    Ok(trace)
}

impl Generator {
    /// Trains the generator's own unfrozen parameters on `data`.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &[TrainPair],
        iterations: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let schedule = self.schedule()?;
        let mut store = std::mem::take(&mut self.store);
        let out = fit(
            &*self, self.codec, &mut store, data, &schedule, iterations, batch_size, lr, rng,
        );
        self.store = store;
        out
    }
}
