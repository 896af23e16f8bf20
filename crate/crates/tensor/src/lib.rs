//! Dense matrices with a tape-based reverse-mode differentiation engine.
//!
//! [`Graph`] records operations on [`Var`] handles; [`ParamStore`] holds the
//! named trainable tensors a graph binds; [`grad_check`] compares
//! `backward` against central finite differences.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{softmax_values, Gradients, Graph, Var};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
