//! Reverse-mode differentiable tensor engine.
//!
//! Computations are recorded on a [`Graph`] as they execute. Inputs that
//! need gradients are registered with [`Graph::leaf`], everything else with
//! [`Graph::constant`]. After building a scalar output, [`Graph::backward`]
//! accumulates `d output / d leaf` into each leaf.
//!
//! ```
//! use listrank::engine::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```
//!
//! The op set is closed: every differentiable op is covered by the
//! finite-difference harness in [`finite_diff_check`].

mod check;
mod gemm;
mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use check::{finite_diff_check, finite_diff_check_many};
pub use graph::{Graph, Var};
pub use kernels::{layer_norm, masked_softmax, sigmoid, softplus};
pub use tensor::Tensor;

/// Engine scalar. `f64` unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("empty attention row (row {row})")]
    EmptyAttentionRow { row: usize },
    #[error("loss must be a single element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("seed gradient has {got} elements, output has {expected}")]
    SeedShape { expected: usize, got: usize },
    #[error("non-finite function value when perturbing input {input} coordinate {coord}")]
    NonFinite { input: usize, coord: usize },
}
