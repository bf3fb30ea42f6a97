//! Bernoulli-latent variational autoencoder with a Bernoulli mixture prior,
//! for joint lossy compression and clustering of binary images, together
//! with raw-pixel baselines and the evaluation metrics.

pub mod baselines;
pub mod codec;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod model;
pub mod report;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
