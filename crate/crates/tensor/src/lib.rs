//! Dense row-major `f64` tensors with a dynamic reverse-mode graph.
//!
//! Every operation on a [`Tensor`] that has at least one input with
//! `requires_grad` records a backward closure on the result. Calling
//! [`gradients`] on a scalar loss walks that graph once in reverse
//! topological order and returns one gradient per requested parameter.
//!
//! Tensors are immutable once built, so the graph is rebuilt every step and
//! parameters are replaced (not mutated) by the optimizer.
//!
//! ```
//! use kplift_tensor::{gradients, Tensor};
//!
//! let x = Tensor::param(vec![-1.0, 2.0], &[2]).unwrap();
//! let loss = x.relu().sum();
//! let g = gradients(&loss, &[x.clone()]).unwrap();
//! assert_eq!(g[0].data(), &[0.0, 1.0]);
//! ```

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod autograd;
mod check;
mod error;
mod kernels;
mod ops;
mod tensor;

pub use autograd::{backward, gradients, Gradients};
pub use check::{finite_difference_check, finite_difference_check_coords, FdReport};
pub use error::TensorError;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
