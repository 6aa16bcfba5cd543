//! Time-step-aware modeling and correction of quantization noise in
//! diffusion samplers, on 2-D Gaussian-mixture targets with exact oracles.
//!
//! The guide in `book/` walks through the pieces; its code blocks run as
//! doc-tests of this crate.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod injection;
pub mod linalg;
pub mod metrics;
pub mod noisemodel;
pub mod quantizer;
pub mod sampler;
pub mod schedule;
pub mod seed;
pub mod source;
pub mod toymodel;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/schedule.md")]
    pub struct Schedule;
    #[doc = include_str!("../../../book/src/toymodel.md")]
    pub struct ToyModel;
    #[doc = include_str!("../../../book/src/quantization.md")]
    pub struct Quantization;
    #[doc = include_str!("../../../book/src/noise-model.md")]
    pub struct NoiseModel;
    #[doc = include_str!("../../../book/src/corrections.md")]
    pub struct Corrections;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
