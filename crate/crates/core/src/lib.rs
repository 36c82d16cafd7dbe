// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod checks;
pub mod downsampler;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod train;
pub mod segmenter;
pub mod transformer;
pub mod upsampler;
pub mod vocab;

pub use error::{Error, Result};
