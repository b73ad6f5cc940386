//! Progressive holistically-nested networks (P-HNN) for pathological lung
//! segmentation in CT, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod postproc;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
