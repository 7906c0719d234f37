//! Grayscale SRGAN toolkit for MR slices, with height-only (anisotropic)
//! upscaling and through-plane volume reconstruction.

pub mod dataset;
pub mod degradation;
pub mod error;
pub mod experiment;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod training;
pub mod volume_sr;

pub use error::{Error, Result};
pub use image::{Provenance, SliceImage, SlicePlane};
