//! SRGAN generator and discriminator for single-channel images.
//!
//! The generator follows the SRResNet layout: a 9x9 head convolution, a
//! trunk of residual blocks with a long skip connection, one sub-pixel
//! upscaling stage per entry of [`GeneratorConfig::stages`], and a 9x9 tail
//! with a shifted-tanh output in `[0, 1]`. Each stage carries its own
//! `(rh, rw)` so height-only upscaling is just `rw = 1`.

mod config;
mod discriminator;
mod generator;

pub use config::{DiscriminatorConfig, GeneratorConfig, UpscaleStage};
pub use discriminator::{DiscTape, Discriminator};
pub use generator::{GenTape, Generator};

use crate::degradation::{bicubic_upsample_with, ResampleParams};
use crate::error::Result;
use crate::image::SliceImage;
use crate::nn::Tensor;

/// Anything that maps an LR slice to an SR slice with fixed integer factors.
pub trait SuperResolver: Sync {
    /// `(height factor, width factor)`.
    fn factors(&self) -> (usize, usize);

    fn super_resolve(&self, lr: &SliceImage) -> Result<SliceImage>;
}

/// Stacks same-sized images into an `(n, 1, h, w)` batch.
pub fn images_to_batch(images: &[&SliceImage]) -> Tensor {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut batch = Tensor::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w), "batch images must share a shape");
        batch
            .slice_mut(ndarray::s![i, 0, .., ..])
            .assign(img.pixels());
    }
    batch
}

/// Plain bicubic enlargement, the baseline every model is compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicubicUpsampler {
    pub factor_h: usize,
    pub factor_w: usize,
    pub params: ResampleParams,
}

impl BicubicUpsampler {
    pub fn new(factor_h: usize, factor_w: usize) -> Self {
        BicubicUpsampler {
            factor_h,
            factor_w,
            params: ResampleParams::default(),
        }
    }
}

impl SuperResolver for BicubicUpsampler {
    fn factors(&self) -> (usize, usize) {
        (self.factor_h, self.factor_w)
    }

    fn super_resolve(&self, lr: &SliceImage) -> Result<SliceImage> {
        bicubic_upsample_with(lr, self.factor_h, self.factor_w, &self.params)
    }
}
