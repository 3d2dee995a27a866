//! Unsupervised object-centric scene decomposition.
//!
//! A grid of foreground detectors attends to objects in parallel through a
//! spatial transformer while a recurrent mixture chain segments the
//! background; the two branches are combined by a pixel-wise mixture
//! likelihood and trained end to end with reparameterized gradients.
//!
//! Numeric code is generic over the scalar type ([`Scalar`]): `f32` is the
//! training dtype, `f64` backs the finite-difference gradient checks.

#![allow(clippy::manual_is_multiple_of, clippy::too_many_arguments)]

pub mod background;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod foreground;
pub mod kvfile;
pub mod model;
pub mod scalar;
pub mod image_ops;
pub mod nn;
pub mod objective;
pub mod rngutil;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
pub use scalar::Scalar;

#[doc(hidden)]
pub fn objective_ln_2pi() -> f64 {
    1.8378770664093453
}

/// Single-precision tape, the training configuration.
pub type Tape32 = tensor::Tape<f32>;
/// Double-precision tape, used by gradient checks and tests.
pub type Tape64 = tensor::Tape<f64>;
