//! Cross-modality liver segmentation: synthesize MR-like slices from
//! annotated CT with a segmentation-guided cycle GAN, then train a U-Net on
//! real and synthetic MR.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
