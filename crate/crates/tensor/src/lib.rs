//! Minimal tensors with reverse-mode automatic differentiation.
//!
//! Values are dense row-major `f64` arrays. Operations are recorded on a
//! [`Graph`] tape and differentiated with [`Graph::backward`]. Trainable
//! tensors live in a [`ParamStore`] and enter a tape through
//! [`Graph::param`].

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{ConvPadding, Graph, Reduction, Var};
pub use lstm::{lstm_cell, lstm_step_projected, LstmWeights};
pub use params::{ParamId, ParamStore};
pub use rng::{rng_normal, rng_uniform, SplitMix64};
pub use tensor::{DType, Tensor};
