//! Wideband XL-MIMO channel synthesis and estimation.

pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod linalg;
pub mod measurement;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod unrolled;

pub use error::{Error, Result};
pub use scalar::Real;

/// Training precision.
pub type Model = unrolled::UnrolledModel<f32>;
/// Double precision, for gradient checks and oracles.
pub type Model64 = unrolled::UnrolledModel<f64>;
pub type Pairs = data::PairSet<f32>;
pub type Pairs64 = data::PairSet<f64>;
pub type Channel = channel::ChannelTensor<f32>;
pub type Channel64 = channel::ChannelTensor<f64>;
