//! A hierarchical variational autoencoder over *datasets*.
//!
//! Sets of exchangeable points are encoded by a statistic network into a
//! posterior over a per-dataset context variable; conditional decoders and
//! per-point latent layers complete the generative model. The crate
//! provides the tensor/autodiff substrate, the model and its training
//! objective, dataset generators and binary containers, and the
//! inference-time procedures (sampling, conditional sampling,
//! representative subsampling, few-shot classification).
//!
//! The `parallel` feature (on by default) runs data-parallel inner loops on
//! rayon; results are bit-identical to the sequential fallback.

pub mod algorithms;
pub mod data;
pub mod distributions;
mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
mod par;
pub mod rng;
pub mod tape;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
