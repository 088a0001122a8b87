//! Binary convolutional networks with budgeted squeeze-and-interaction
//! shortcuts and block-wise distillation from a float teacher.

pub mod bits;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
