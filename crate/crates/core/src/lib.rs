//! Multi-category 2D keypoint detection and 3D lifting from 2D supervision.
//!
//! Building blocks, bottom up:
//!
//! * [`geometry`]: 6D rotations, structures, orthographic projection.
//! * [`shape_model`]: category registry and the cut-off shape dictionary.
//! * [`lifter`] and [`detector`]: the two networks.
//! * [`assignment`]: Hungarian matching and the training losses.
//! * [`metrics`]: MPJPE, stress, mutual coherence.
//! * [`synthetic`]: procedural datasets with rendered images.
//! * [`train`]: optimizers, training phases, checkpoints, evaluation.

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod lifter;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod shape_model;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use kplift_tensor as tensor;
pub use model::{Model, ModelConfig};
