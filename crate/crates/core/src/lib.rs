//! Multi-illuminant color constancy toolkit.
//!
//! Estimates per-pixel illuminant maps with a tri-branch encoder-decoder
//! network fused by attentional weights, benchmarks the result against
//! classical statistics estimators, and corrects images with a von Kries
//! diagonal transform. Ships a deterministic synthetic Mondrian dataset
//! generator so everything runs end-to-end without external data.
//!
//! All numerics are generic over the scalar type (`f32` / `f64`) through
//! the [`Scalar`] trait; concrete aliases live at the crate root.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use image::{ImageTensor, IlluminantMap, ValidityMask};
pub use metrics::ErrorStats;

/// Single-precision aliases, the default for training and the CLI.
pub type ImageF32 = image::ImageTensor<f32>;
pub type MapF32 = image::IlluminantMap<f32>;

/// Double-precision aliases, used where tight tolerances matter
/// (gradient checks, metric oracles).
pub type ImageF64 = image::ImageTensor<f64>;
pub type MapF64 = image::IlluminantMap<f64>;
