use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sub-pixel upscaling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpscaleStage {
    pub rh: usize,
    pub rw: usize,
}

impl UpscaleStage {
    pub const ISO2: UpscaleStage = UpscaleStage { rh: 2, rw: 2 };
    pub const HEIGHT2: UpscaleStage = UpscaleStage { rh: 2, rw: 1 };
}

const ALLOWED_TOTALS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default = "one")]
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub stages: Vec<UpscaleStage>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn doubling_stages(factor: usize, stage: UpscaleStage) -> Result<Vec<UpscaleStage>> {
    if !factor.is_power_of_two() || !ALLOWED_TOTALS.contains(&factor) {
        return Err(Error::Config(format!(
            "upscale factor {factor} is not one of {ALLOWED_TOTALS:?}"
        )));
    }
    Ok(vec![stage; factor.trailing_zeros() as usize])
}

impl GeneratorConfig {
    /// 64 channels, 16 residual blocks, `log2(factor)` isotropic x2 stages.
    pub fn isotropic(factor: usize) -> Result<Self> {
        Ok(GeneratorConfig {
            in_channels: 1,
            base_channels: 64,
            num_residual_blocks: 16,
            stages: doubling_stages(factor, UpscaleStage::ISO2)?,
            batch_norm: true,
        })
    }

    /// Same trunk as [`isotropic`](Self::isotropic), height-only stages.
    pub fn anisotropic(factor: usize) -> Result<Self> {
        Ok(GeneratorConfig {
            stages: doubling_stages(factor, UpscaleStage::HEIGHT2)?,
            ..Self::isotropic(factor)?
        })
    }

    pub fn with_size(mut self, base_channels: usize, num_residual_blocks: usize) -> Self {
        self.base_channels = base_channels;
        self.num_residual_blocks = num_residual_blocks;
        self
    }

    /// Total `(height, width)` upscale factor.
    pub fn factors(&self) -> (usize, usize) {
        self.stages
            .iter()
            .fold((1, 1), |(h, w), s| (h * s.rh, w * s.rw))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Config(format!(
                "generator takes 1 input channel, got {}",
                self.in_channels
            )));
        }
        if self.base_channels == 0 || self.num_residual_blocks == 0 {
            return Err(Error::Config(
                "base_channels and num_residual_blocks must be >= 1".into(),
            ));
        }
        for s in &self.stages {
            if s.rh == 0 || s.rw == 0 || (s.rh == 1 && s.rw == 1) {
                return Err(Error::Config(format!(
                    "invalid upscale stage ({}, {})",
                    s.rh, s.rw
                )));
            }
        }
        let (fh, fw) = self.factors();
        for (axis, f) in [("height", fh), ("width", fw)] {
            if !ALLOWED_TOTALS.contains(&f) {
                return Err(Error::Config(format!(
                    "total {axis} factor {f} is not one of {ALLOWED_TOTALS:?}"
                )));
            }
        }
        Ok(())
    }

    /// Trainable scalars in the upscaling stages: per stage, a 3x3
    /// `C -> C*rh*rw` convolution with bias plus `C` PReLU slopes.
    pub fn upscale_parameter_count(&self) -> usize {
        let c = self.base_channels;
        self.stages
            .iter()
            .map(|s| {
                let r = s.rh * s.rw;
                9 * c * c * r + c * r + c
            })
            .sum()
    }

    /// Trainable scalars outside the upscaling stages.
    pub fn trunk_parameter_count(&self) -> usize {
        let c = self.base_channels;
        let bn = if self.batch_norm { 2 * c } else { 0 };
        let head = 81 * c + c + c;
        let block = 2 * (9 * c * c + c) + 2 * bn + c;
        let trunk = 9 * c * c + c + bn;
        let tail = 81 * c + 1;
        head + self.num_residual_blocks * block + trunk + tail
    }
}

/// The 8-convolution SRGAN discriminator with a fixed input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    #[serde(default = "one")]
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub base_channels: usize,
    pub dense_units: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

impl DiscriminatorConfig {
    /// 224x224 input, 64 base channels, 1024 dense units.
    pub fn standard() -> Self {
        DiscriminatorConfig {
            in_channels: 1,
            input_height: 224,
            input_width: 224,
            base_channels: 64,
            dense_units: 1024,
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Config(format!(
                "discriminator takes 1 input channel, got {}",
                self.in_channels
            )));
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.base_channels == 0
            || self.dense_units == 0
        {
            return Err(Error::Config("discriminator sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// `(out channels, stride)` of the seven normalized convolutions that
    /// follow the first one.
    pub(crate) fn blocks(&self) -> [(usize, usize); 7] {
        let c = self.base_channels;
        [
            (c, 2),
            (2 * c, 1),
            (2 * c, 2),
            (4 * c, 1),
            (4 * c, 2),
            (8 * c, 1),
            (8 * c, 2),
        ]
    }

    /// Spatial size after the four stride-2 convolutions.
    pub fn feature_hw(&self) -> (usize, usize) {
        let down = |mut n: usize| {
            for _ in 0..4 {
                n = n.div_ceil(2);
            }
            n
        };
        (down(self.input_height), down(self.input_width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_factor_recipes() {
        assert_eq!(
            GeneratorConfig::isotropic(4).unwrap().stages,
            vec![UpscaleStage::ISO2; 2]
        );
        assert_eq!(GeneratorConfig::isotropic(8).unwrap().factors(), (8, 8));
        assert_eq!(GeneratorConfig::anisotropic(8).unwrap().factors(), (8, 1));
        assert!(GeneratorConfig::isotropic(3).is_err());
        assert!(GeneratorConfig::isotropic(16).is_err());
    }

    #[test]
    fn validation() {
        let mut c = GeneratorConfig::anisotropic(4).unwrap();
        c.validate().unwrap();
        c.stages.push(UpscaleStage { rh: 1, rw: 1 });
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.stages.pop();
        c.stages.push(UpscaleStage { rh: 3, rw: 1 });
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::isotropic(2).unwrap();
        c.in_channels = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn discriminator_feature_size() {
        assert_eq!(DiscriminatorConfig::standard().feature_hw(), (14, 14));
        let mut d = DiscriminatorConfig::standard();
        d.input_height = 33;
        d.input_width = 16;
        assert_eq!(d.feature_hw(), (3, 1));
    }
}
