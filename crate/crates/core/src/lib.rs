//! Lossy image codec that codes a quantized autoencoder latent and removes the
//! quantization error at the receiver with a short, predicted run of DDIM
//! denoising steps.

pub mod autoencoder;
pub mod checkpoint;
pub mod codec;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod param_estimator;
pub mod quantization;
pub mod schedule;
pub mod training;

pub use error::{CoderError, Error, ErrorClass, Result};
