//! Structured discrete gaze latents for attention-gated classification.
//!
//! The crate is generic over the float type (`f32` or `f64`, via [`Scalar`]);
//! `f64` is the default everywhere and the aliases below pin it explicitly.

// `!(x > 0)` style checks are kept because they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod error;
pub mod estimators;
pub mod gumbel;
pub mod harness;
pub mod latent;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synthtask;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type ParamSet64 = diffcore::ParamSet<f64>;
pub type ParamSet32 = diffcore::ParamSet<f32>;
pub type ParamGrads64 = diffcore::ParamGrads<f64>;
pub type Tape64 = diffcore::Tape<f64>;
pub type Example64 = synthtask::Example<f64>;
pub type Dataset64 = synthtask::Dataset<f64>;
