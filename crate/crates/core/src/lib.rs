//! Adaptive-margin contrastive learning for regression.
//!
//! The crate is organised around the pieces of a multi-task regression
//! trainer whose contrastive branch uses label-aware margins:
//!
//! - [`ecdf`]: empirical CDF of training labels and the pairwise adaptive
//!   margins derived from it.
//! - [`losses`]: AdaCon, SupCon, N-pair, adaptive triplet and the regression
//!   losses, each with an analytic gradient, plus a finite-difference checker.
//! - [`model`]: a small MLP encoder with a normalized projection head and a
//!   scalar regression head, manual backpropagation and SGD with momentum.
//! - [`data`]: synthetic benchmarks, CSV ingestion and batch augmentation.
//! - [`trainer`]: the combined training loop with automatic loss balancing.
//! - [`evalviz`]: regression metrics and feature-space diagnostics.
//! - [`cli`]: the `adacon` command-line front end.

pub mod cli;
pub mod data;
pub mod ecdf;
pub mod error;
pub mod evalviz;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
