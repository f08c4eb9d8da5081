//! Jet pseudo-color enhancement of grayscale images and a from-scratch
//! Vision Transformer classifier built on a minimal reverse-mode autodiff
//! engine, with a deterministic training loop (Adam, early stopping on
//! test accuracy, CSV history) and a one-vs-rest multi-class evaluation
//! suite.
//!
//! The `pcvit` binary in this workspace wires the pieces into a
//! preprocess / train / evaluate / predict / import-weights pipeline; see
//! the repository README for the command-line surface and file formats.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod pseudocolor;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vit;
pub mod weights;

pub use error::{Error, Result};
