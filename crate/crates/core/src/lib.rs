//! Text-conditioned panorama generation and a navigation agent trained on
//! the generated environments.

pub mod agent;
pub mod autodiff;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod pano;
pub mod rng;
pub mod scene;
#[cfg(test)]
mod testutil;
pub mod world;

pub use error::{Error, Result};
