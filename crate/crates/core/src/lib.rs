//! Conditional latent diffusion for singing-voice separation.
//!
//! A small audio codec compresses waveforms into latents; a U-Net generator
//! learns to denoise vocal latents conditioned on the mixture, and a DDIM
//! sampler turns noise into separated vocals. Metrics and a latent-robustness
//! harness evaluate the result.

pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod diffusion;
pub mod gradcheck;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod pitch;
pub mod robustness;
pub mod rvq;
pub mod sampler;
pub mod spectral;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
