//! Detection of coherent surface-wave energy in distributed acoustic sensing
//! (DAS) strain-rate recordings.
//!
//! The pipeline: synthesize or load segments ([`store`], [`synth`]), explore
//! them ([`metrics`]), label tiles ([`label`]), train the residual CNN
//! ([`net`], [`train`]) and scan recordings for wave probability ([`infer`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod infer;
pub mod label;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod scalar;
pub mod store;
pub mod train;

pub use scalar::Scalar;

pub type Model32 = net::Model<f32>;
pub type Model64 = net::Model<f64>;
pub type Histogram64 = metrics::Histogram<f64>;
