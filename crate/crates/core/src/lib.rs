//! Benchmarking engine for multimodal variational autoencoders.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`nn`], [`optim`], [`checkpoint`], [`seed`],
//!   [`gradcheck`]: a small `f64` reverse-mode autodiff core with MLPs and Adam.
//! - [`distributions`]: diagonal Gaussians, reparameterised sampling, KL.
//! - [`fusion`]: product-of-experts, mixture-of-experts, subset mixtures and
//!   the private/shared layout used by the disentangled model.
//! - [`model`], [`objectives`], [`likelihood`]: the four multimodal VAEs,
//!   their training objectives, generation and importance-weighted
//!   log-likelihood estimates.
//! - [`cdsprites`]: procedural generation of the five-level captioned shapes
//!   dataset.
//! - [`evaluator`]: feature extraction, caption parsing and the
//!   Strict/Features/Letters coherence metrics.
//! - [`runner`]: configs, training, grid search, evaluation and exports.
//!
//! Data-parallel loops live in [`parallel`] and fall back to sequential
//! execution when the `parallel` feature is disabled.

pub mod autodiff;
pub mod cdsprites;
pub mod checkpoint;
pub mod distributions;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod gradcheck;
pub mod likelihood;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod runner;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
