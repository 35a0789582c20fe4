//! Multi-source temporal encoder with synchronized spatiotemporal
//! downsampling, land-cover-fraction pretraining with a mean teacher, and a
//! multi-stage decoder for pixel-wise agricultural mapping.

pub mod backbone;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fractions;
pub mod nn;
pub mod params;
pub mod pretrain;
pub mod synthetic;
pub mod training;
pub mod types;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
