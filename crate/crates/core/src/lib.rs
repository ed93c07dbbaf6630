//! Sketch part parsing toolkit: stroke thinning, boundary-softened and
//! class-weighted cross-entropy, staged shared/branch training, augmentation,
//! segmentation metrics and a synthetic sketch generator.

pub mod augment;
pub mod classstats;
pub mod error;
pub mod gradcheck;
pub mod homotrans;
pub mod metrics;
pub mod raster;
pub mod seed;
pub mod staged;
pub mod swloss;
pub mod synthgen;
pub mod tinynet;

pub use error::{Error, Result};
