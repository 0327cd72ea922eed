//! Noise schedule, denoiser, training objective and samplers.

mod model;
mod sampler;
mod schedule;
mod train;

pub use model::{DenoiserConfig, EpsModel, Generator, GeneratorConfig, LatentCodec, TapeEps, META_KEY};
pub use sampler::{inpaint_sample, reverse_mean, run_from, sample};
pub use schedule::{
    forward_noise, make_schedule, NoiseSchedule, NoisedSample, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
pub use train::{denoise_loss, fit, TrainPair};

#[cfg(test)]
mod tests;
