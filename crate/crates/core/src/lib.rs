//! Dual-exposure night image restoration.
//!
//! A long exposure is low-noise but motion-blurred; a short exposure taken
//! right after it is sharp but noisy. This crate synthesizes such pairs from
//! sharp frame sequences, simulates sensor noise in a RAW domain, and trains a
//! two-phase network: a deblurring stage at a fixed low resolution followed by
//! a full-resolution enhancement stage that aligns long-exposure features to
//! the short exposure with modulated deformable convolutions.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod isp;
pub(crate) mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::autodiff::{ConvVars, Gradients, Tape, Var};
pub use tensor::{ConvGeometry, Shape, Tensor};

/// Single-precision image/feature tensor used for training and inference.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by gradient-check oracles.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
