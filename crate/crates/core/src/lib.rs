//! Reconstruction-error anomaly detection for ensemble and time-dependent
//! simulation fields using convolutional autoencoders trained from scratch.

pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod fsutil;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod tnsr;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{mse, Scalar, Shape, Tensor};
