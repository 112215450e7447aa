//! Learning segmentation models from inconsistent pixel-level labels.
//!
//! The pipeline represents ambiguous defect regions as rough sets (a certain
//! lower approximation inside a possible upper approximation), trains a
//! U-Net style backbone with block-structured Bayesian dropout (PSBM), corrects
//! noisy labels from the variance of stochastic passes, and grades defects by
//! how their physical size varies with the predicted probability level.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the precision used for training and inference.

pub mod confidence;
pub mod error;
pub mod io;
pub mod mc_infer;
pub mod metrics;
pub mod model;
pub mod psbm;
pub mod rng;
pub mod rough_core;
pub mod rough_loss;
pub mod scalar;
pub mod synth_data;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training/inference precision.
pub type Model32 = model::Model<f32>;
/// Precision used by gradient checks and oracles.
pub type Model64 = model::Model<f64>;
pub type ProbabilityMask32 = rough_core::ProbabilityMask<f32>;
pub type ProbabilityMask64 = rough_core::ProbabilityMask<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
