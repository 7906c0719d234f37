//! Synthetic LR generation and the bicubic baseline.
//!
//! Both directions use the Keys cubic convolution kernel applied separably,
//! height first. Downsampling widens the kernel by the factor when
//! anti-aliasing is on, so the filter acts as a low-pass prefilter.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SliceImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Bicubic,
}

/// How taps falling outside the image are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Repeat the edge sample.
    #[default]
    Replicate,
    /// Half-sample symmetric mirror (`-1 -> 0`, `n -> n - 1`).
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleParams {
    /// Keys kernel constant.
    #[serde(default = "default_cubic_a")]
    pub cubic_a: f64,
    #[serde(default)]
    pub boundary: BoundaryMode,
}

fn default_cubic_a() -> f64 {
    -0.5
}

impl Default for ResampleParams {
    fn default() -> Self {
        ResampleParams {
            cubic_a: default_cubic_a(),
            boundary: BoundaryMode::Replicate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub factor_h: usize,
    pub factor_w: usize,
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default = "yes")]
    pub antialias: bool,
    #[serde(default)]
    pub resample: ResampleParams,
}

fn yes() -> bool {
    true
}

impl DegradationSpec {
    pub fn new(factor_h: usize, factor_w: usize) -> Self {
        DegradationSpec {
            factor_h,
            factor_w,
            kernel: KernelKind::Bicubic,
            antialias: true,
            resample: ResampleParams::default(),
        }
    }

    pub fn isotropic(factor: usize) -> Self {
        Self::new(factor, factor)
    }

    /// Height-only degradation.
    pub fn anisotropic(factor: usize) -> Self {
        Self::new(factor, 1)
    }

    pub fn is_isotropic(&self) -> bool {
        self.factor_h == self.factor_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor_h == 0 || self.factor_w == 0 {
            return Err(Error::Config(format!(
                "degradation factors must be >= 1, got ({}, {})",
                self.factor_h, self.factor_w
            )));
        }
        if !(self.resample.cubic_a.is_finite()) {
            return Err(Error::Config("cubic kernel constant must be finite".into()));
        }
        Ok(())
    }
}

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps for one output sample: the index whose value anchors the sum, then
/// `(source index, normalized weight)` pairs.
struct Taps {
    anchor: usize,
    taps: Vec<(usize, f64)>,
}

fn resolve(j: isize, len: usize, mode: BoundaryMode) -> usize {
    let n = len as isize;
    let idx = match mode {
        BoundaryMode::Replicate => j.clamp(0, n - 1),
        BoundaryMode::Reflect => {
            let period = 2 * n;
            let m = j.rem_euclid(period);
            if m < n {
                m
            } else {
                period - 1 - m
            }
        }
    };
    idx as usize
}

fn taps_for(in_len: usize, out_len: usize, antialias: bool, p: &ResampleParams) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = if antialias && scale > 1.0 { scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut raw: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            for j in lo..=hi {
                let w = cubic_kernel((j as f64 - center) / stretch, p.cubic_a);
                if w != 0.0 {
                    raw.push((resolve(j, in_len, p.boundary), w));
                }
            }
            let total: f64 = raw.iter().map(|t| t.1).sum();
            let anchor = raw
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|t| t.0)
                .unwrap_or_else(|| resolve(center.round() as isize, in_len, p.boundary));
            raw.iter_mut().for_each(|t| t.1 /= total);
            Taps { anchor, taps: raw }
        })
        .collect()
}

fn apply_taps(src: ArrayView1<f64>, mut dst: ArrayViewMut1<f64>, taps: &[Taps]) {
    for (o, t) in dst.iter_mut().zip(taps) {
        // Anchored form: exact for constant input since every difference is 0.
        let base = src[t.anchor];
        let delta: f64 = t.taps.iter().map(|&(j, w)| w * (src[j] - base)).sum();
        *o = base + delta;
    }
}

/// Resamples one axis of `data` to `out_len` samples. No clamping.
fn resample_axis(
    data: &Array2<f64>,
    axis: Axis,
    out_len: usize,
    antialias: bool,
    p: &ResampleParams,
) -> Array2<f64> {
    let in_len = data.len_of(axis);
    if in_len == out_len {
        return data.clone();
    }
    let taps = taps_for(in_len, out_len, antialias, p);
    let mut shape = [data.nrows(), data.ncols()];
    shape[axis.index()] = out_len;
    let mut out = Array2::<f64>::zeros(shape);
    let lane_axis = Axis(1 - axis.index());
    for (src, dst) in data.axis_iter(lane_axis).zip(out.axis_iter_mut(lane_axis)) {
        apply_taps(src, dst, &taps);
    }
    out
}

fn resample(
    img: &SliceImage,
    out_h: usize,
    out_w: usize,
    antialias: bool,
    p: &ResampleParams,
) -> Result<SliceImage> {
    let rows = resample_axis(img.pixels(), Axis(0), out_h, antialias, p);
    let both = resample_axis(&rows, Axis(1), out_w, antialias, p);
    SliceImage::from_clamped(both, img.provenance().clone())
}

/// Reduces `img` by the factors in `spec`. Both dimensions must divide evenly.
pub fn downsample(img: &SliceImage, spec: &DegradationSpec) -> Result<SliceImage> {
    spec.validate()?;
    let (h, w) = img.dim();
    if h % spec.factor_h != 0 || w % spec.factor_w != 0 {
        return Err(Error::Degrade(format!(
            "{h}x{w} is not divisible by factors ({}, {}); crop or pad first",
            spec.factor_h, spec.factor_w
        )));
    }
    if spec.factor_h == 1 && spec.factor_w == 1 {
        return Ok(img.clone());
    }
    resample(
        img,
        h / spec.factor_h,
        w / spec.factor_w,
        spec.antialias,
        &spec.resample,
    )
}

/// Bicubic enlargement with the default kernel constant and boundary mode.
pub fn bicubic_upsample(img: &SliceImage, factor_h: usize, factor_w: usize) -> Result<SliceImage> {
    bicubic_upsample_with(img, factor_h, factor_w, &ResampleParams::default())
}

pub fn bicubic_upsample_with(
    img: &SliceImage,
    factor_h: usize,
    factor_w: usize,
    params: &ResampleParams,
) -> Result<SliceImage> {
    if factor_h == 0 || factor_w == 0 {
        return Err(Error::Degrade(format!(
            "upsample factors must be >= 1, got ({factor_h}, {factor_w})"
        )));
    }
    let (h, w) = img.dim();
    resample(img, h * factor_h, w * factor_w, false, params)
}

/// `(lr, hr)` training pair: `hr` is the input itself.
pub fn make_pair(img: &SliceImage, spec: &DegradationSpec) -> Result<(SliceImage, SliceImage)> {
    let lr = downsample(img, spec)?;
    Ok((lr, img.clone()))
}
