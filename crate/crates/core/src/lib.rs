//! Decoder-only autoregressive trajectory forecasting with query-centric
//! relative attention, written from scratch on a small tape autograd.
//!
//! Everything numeric is generic over [`Scalar`]; the `*32` / `*64` aliases
//! pick a width.

pub mod autograd;
pub mod geometry;
pub mod params;
pub mod scalar;
pub mod special;
pub mod tensor;
pub mod nn;
pub mod config;
pub mod generator;
pub mod scene;
pub mod map_encoder;
pub mod decoder;
pub mod loss;
pub mod metrics;
pub mod checkpoint;
pub mod train;

pub use config::{DecoderConfig, GeneratorConfig, TrainConfig, WinnerSelection};
pub use decoder::{Forecast, Model, RunMode};
pub use scalar::Scalar;
pub use scene::Scene;

pub type Model32 = decoder::Model<f32>;
pub type Model64 = decoder::Model<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Graph32<'p> = autograd::Graph<'p, f32>;
pub type Graph64<'p> = autograd::Graph<'p, f64>;
