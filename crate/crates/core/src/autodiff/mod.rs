//! Dense 64-bit tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every primitive applied to its nodes; [`Graph::backward`]
//! walks the tape in reverse and returns exact adjoints for every trainable
//! leaf. Graphs are single-owner and single-threaded; tensors are plain values
//! and can be shared freely.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_many};
pub use graph::{sample_gaussian_reparam, sigmoid, Graph, Gradients, Var, LOG_VAR_MAX, LOG_VAR_MIN};
pub use tensor::Tensor;
