//! Variational, sample-specific composition of task vectors.
//!
//! A pool of task vectors (fine-tuned minus base parameters) is split into
//! named blocks. An amortized inference network maps each input to a
//! posterior over per-block composition coefficients, trained under a
//! Gaussian or Spike-and-Slab prior, optionally with a deterministic,
//! uncertainty-gated posterior. The [`harness`] module generates synthetic
//! multi-task suites and runs the four training regimes end to end.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod gating;
pub mod harness;
pub mod inference;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod task_vectors;

pub use autodiff::{Graph, Gradients, Tensor, Var};
pub use error::{Error, Result};
