//! Masked-reconstruction pretraining of a 3D patch transformer with dual
//! Gram-matrix regularization, fine-tuning for volume classification and
//! representation diagnostics.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f32`
//! for training and `f64` for gradient checks.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod scalar;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CsCrl32 = model::CsCrl<f32>;
pub type CsCrl64 = model::CsCrl<f64>;
pub type Classifier32 = model::Classifier<f32>;
pub type Classifier64 = model::Classifier<f64>;
pub type TokenSequence32 = data::TokenSequence<f32>;
pub type TokenSequence64 = data::TokenSequence<f64>;
pub type ParamStore32 = model::ParamStore<f32>;
pub type ParamStore64 = model::ParamStore<f64>;
