//! Contrastive one-class anomaly detection for time series.

pub mod augment;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{CocaError, Result};
