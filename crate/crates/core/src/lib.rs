//! Latent causal model toolkit: a small reverse-mode autodiff engine,
//! a synthetic data generator with multiple domains, a VAE that separates
//! content from style, and helpers for evaluation and label resampling.

pub mod cli;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod lcsvae;
pub mod ndiff;
pub mod resampler;
pub mod rng;
pub mod scm;
pub mod trainer;

pub use error::{Error, Result};
