//! Semi-supervised binary segmentation with feature and output consistency
//! training.
//!
//! A shared encoder feeds a main decoder (trained on labeled patches) and an
//! auxiliary decoder that sees the encoder output after multiplicative noise
//! was injected at an intermediate depth. On unlabeled patches the auxiliary
//! decoder's outputs and per-stage features are pulled towards the main
//! decoder's, which are treated as constants.

pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::FeatureMap;

/// Single-precision model used for training.
pub type SegModel32 = model::SegModel<f32>;
/// Double-precision model used for gradient checks.
pub type SegModel64 = model::SegModel<f64>;
pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
