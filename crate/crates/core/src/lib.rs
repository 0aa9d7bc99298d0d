//! Stochastic time-series forecasting with a digit-tokenizing decoder-only
//! transformer.
//!
//! Real values are mean-abs scaled, squashed into `[0, 1]` and split into
//! `p` base-`B` digits. A small causal transformer learns the next-digit
//! distribution with a significance-weighted cross-entropy, and forecasts are
//! produced by Monte Carlo simulation of whole trajectories. The evaluation
//! side implements the rolling-window protocol: normalized error and quantile
//! metrics, interquartile-mean aggregation with bootstrap intervals, and the
//! Kupiec proportion-of-failures backtest.
//!
//! The network, its optimizer and the sampler are generic over the floating
//! point type (see [`Scalar`]); [`ModelF32`] and [`ModelF64`] name the two
//! concrete instantiations.

pub mod backtest;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision network parameters, the usual choice for training.
pub type ModelF32 = model::Parameters<f32>;
/// Double-precision network parameters, used for gradient checking.
pub type ModelF64 = model::Parameters<f64>;
/// Adam state matching [`ModelF32`].
pub type AdamF32 = training::AdamState<f32>;
/// Adam state matching [`ModelF64`].
pub type AdamF64 = training::AdamState<f64>;
