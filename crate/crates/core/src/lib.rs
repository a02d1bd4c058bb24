//! Temporal softmax attention with exact analytic Jacobians, sensitivity
//! bounds and diagonal-sink diagnostics, plus a small spatio-temporal
//! forecaster (temporal attention + graph convolution) trained with
//! hand-derived backpropagation.
//!
//! All arithmetic is 64-bit. Every random draw flows from explicit seeds
//! through the [`rng`] module so runs are reproducible bit-for-bit.

pub mod attention;
pub mod bounds;
pub mod cli;
pub mod data;
pub mod error;
pub mod export;
pub mod jacobian;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
