//! Latent-space emulation of dynamical systems at desk scale.

pub mod autoencoder;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod rollout;
pub mod sampler;
mod error;
pub mod spectral;

pub use error::{Error, Result};
