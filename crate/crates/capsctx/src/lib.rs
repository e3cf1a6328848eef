//! Context-aware capsule network engine.
//!
//! A from-scratch capsule classifier with three extensions over the vanilla
//! dynamic-routing baseline: trainable routing-weight initialization derived
//! from per-capsule statistics, a densely connected CRF refining primary
//! capsule predictions by mean-field iterations, and a Cholesky-based
//! correlation combiner with feature-dependent mixing coefficients. All of it
//! sits on a minimal reverse-mode autodiff tape with a finite-difference
//! verification harness.

pub mod capsnet;
pub mod checks;
pub mod config;
pub mod correlation;
pub mod crf;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod routing;
pub mod routing_init;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod util;

pub use error::{CapsError, Result};
pub use tensor::Tensor;
