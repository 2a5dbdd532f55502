//! Compact attention-based caption generation.
//!
//! The crate covers the whole decoder side of a captioning model: a radix
//! codec that shrinks the output vocabulary to `base + 2` symbols, additive
//! attention with optional tied feature projection and multiple heads, an
//! LSTM decoder with its training loss, optimisation, beam search, BLEU, and
//! an exact parameter accountant.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pick the precision used for training and for checks.

pub mod accountant;
pub mod attention;
pub mod autodiff;
pub mod corpus;
pub mod decoder;
mod error;
pub mod inference;
pub mod metrics;
pub mod radix;
mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Params32 = autodiff::ParameterSet<f32>;
pub type Params64 = autodiff::ParameterSet<f64>;
pub type Model32 = decoder::Model<f32>;
pub type Model64 = decoder::Model<f64>;
