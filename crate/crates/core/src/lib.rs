//! Object counting and localization on confidence maps.
//!
//! The pipeline: a truncated-VGG feature extractor feeds a pyramid pooling
//! module, whose enhanced features drive a chain of refinement stages. Each
//! stage emits a per-pixel confidence map trained against ground truth built
//! by dropping a Gaussian at every annotated object center, with the spread
//! shrinking stage by stage. Object positions are the thresholded local
//! maxima of the last map.
//!
//! Modules follow that flow: [`tensor`] (autodiff substrate), [`confmap`]
//! (ground truth and losses), [`network`] (architecture), [`localization`]
//! (peak extraction), [`metrics`] (counting/position scores), [`dataset`]
//! (tiling, splits, synthetic imagery), [`trainer`] (training loop and
//! evaluation protocol).

pub mod confmap;
pub mod dataset;
pub mod error;
pub mod localization;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
