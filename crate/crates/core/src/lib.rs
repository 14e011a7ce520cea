//! Kernel-generating fully convolutional panoptic segmentation.

pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod model;
pub mod panoptic;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Scalar, Tape, Tensor, Var};
