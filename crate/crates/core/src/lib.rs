//! Multi-margin structured metric learning for RGB and thermal tracking.

pub mod classifier;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod json17;
pub mod losses;
pub mod metric;
pub mod mining;
pub mod model;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use metric::{Metric, Vector};
