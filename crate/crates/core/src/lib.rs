//! Mixture-of-attack-experts layers, class-regularization losses and
//! biometric evaluation on a small reverse-mode autodiff engine.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision types used for training.

pub mod crloss;
pub mod datasynth;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod label;
pub mod layers;
pub mod metrics;
pub mod moae;
pub mod optim;
pub mod params;
pub mod scalar;

pub use error::{Error, Result};
pub use label::Label;
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph64 = diffcore::Graph<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph32 = diffcore::Graph<f32>;
