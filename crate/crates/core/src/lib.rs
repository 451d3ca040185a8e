//! Image forgery localization: a pyramid transformer encoder, multi-spectral
//! and multi-scale skip attention, a curvature-based difficulty prior and a
//! text-guided decoder, plus data, training, evaluation and checkpoint tooling.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod difficulty;
pub mod error;
pub mod m2s;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;
