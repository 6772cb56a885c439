//! Frozen-transformer engine for universal time-series analysis.
//!
//! A small reverse-mode tensor engine drives a GPT-2 style backbone whose
//! attention and feed-forward weights stay frozen while embeddings, layer norms,
//! task heads and optional adapters (temporal, channel, frequency, anomaly) are
//! trained. Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the default `f64` precision.

pub mod adapters;
pub mod analysis;
pub mod anomaly_adapter;
pub mod backbone;
pub mod check;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod preprocessing;
pub mod scalar;
pub mod tasks_heads;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision differentiation graph.
pub type Graph = tensor::Graph<f64>;
