//! Semi-supervised contrastive learning with similarity co-calibration.
//!
//! A pseudo-labeling branch (cross entropy on a classifier head) and a
//! multi-positive margin contrastive branch (projection head plus a
//! momentum key encoder and negative queue) are trained jointly over a
//! shared MLP backbone. The two branches exchange predictions: class
//! prototypes rescale the pseudo labels, and the pseudo labels choose the
//! contrastive positives.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix it to the precision used by the
//! experiment harness.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cocalibration;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod math;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision encoder parameters.
pub type Encoder = encoder::EncoderParams<f64>;
/// Single-precision encoder parameters.
pub type EncoderF32 = encoder::EncoderParams<f32>;
/// Double-precision probability vector.
pub type Distribution = math::Distribution<f64>;
/// Double-precision contrastive loss inputs.
pub type ContrastiveInputs = losses::ContrastiveInputs<f64>;
/// Double-precision co-calibration state.
pub type CalibrationState = cocalibration::CalibrationState<f64>;
/// Double-precision trainer; the precision the CLI runs at.
pub type Trainer = trainer::Trainer<f64>;
/// Single-precision trainer.
pub type TrainerF32 = trainer::Trainer<f32>;
