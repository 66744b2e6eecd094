//! Residual CNNs with CBAM attention for ship classification on optical
//! satellite imagery: tensors with reverse-mode differentiation, layers,
//! attention blocks, the three comparative architectures, the data pipeline,
//! training/evaluation and attention heatmaps.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradsweep;
pub mod heatmap;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
