//! Frequency-aware gradient rectification for confidence calibration under
//! distribution shift.
//!
//! The crate bundles a small reverse-mode autodiff engine, JPEG-style DCT
//! low-pass filtering, calibration losses and metrics, the gradient
//! rectifier, synthetic and CIFAR-format data tooling, and the training
//! harness that ties them together.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod filter;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rectify;
pub mod tensor;

pub use error::{Error, Result};
