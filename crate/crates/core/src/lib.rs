//! Semi-supervised segmentation with KAN-augmented U-Nets on CPU.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod nn;
pub mod spline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{backward, no_grad, ComputationTape, Tensor};
