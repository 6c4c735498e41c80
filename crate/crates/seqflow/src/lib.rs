//! Autoregressive normalizing flows for sequential latent data.
//!
//! The crate implements a global–local flow over frame sequences: a deep
//! sequence-wide causal affine flow composed with per-frame shallow flows,
//! trained by exact maximum likelihood on noise-augmented data, with a
//! jointly trained causal denoiser fit to the flow's own score. Sampling
//! runs sequentially with key/value caches, in parallel via block-wise
//! Jacobi fixed-point iteration, or as a bounded-memory stream.

pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod jacobi;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod streaming;
pub mod trainer;

pub use error::{Error, Result};
