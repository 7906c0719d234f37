//! Image quality metrics and method-comparison reports.

mod report;

pub use report::{evaluate_methods, EvalMethod, ImageMetric, MethodRow, MetricsReport, SrFn};

use ndarray::{Array1, Array2, ArrayBase, ArrayView2, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SliceImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub data_range: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            data_range: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_range.is_finite() && self.data_range > 0.0) {
            return Err(Error::Config(format!(
                "data_range must be positive, got {}",
                self.data_range
            )));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssim window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.ssim_sigma) || !pos(self.ssim_k1) || !pos(self.ssim_k2) {
            return Err(Error::Config(
                "ssim sigma, k1 and k2 must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Normalised 1-D Gaussian taps of length `ssim_window`.
    pub fn gaussian_window(&self) -> Array1<f64> {
        let r = (self.ssim_window / 2) as f64;
        let w = Array1::from_shape_fn(self.ssim_window, |i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * self.ssim_sigma * self.ssim_sigma)).exp()
        });
        let s = w.sum();
        w / s
    }
}

/// Peak signal-to-noise ratio. Identical inputs have no finite value and are
/// kept apart so they cannot distort averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Identical => None,
            Psnr::Db(v) => Some(v),
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.2} dB"),
        }
    }
}

pub fn psnr(a: &SliceImage, b: &SliceImage, p: &MetricParams) -> Result<Psnr> {
    psnr_arrays(a.pixels(), b.pixels(), p)
}

/// PSNR over arrays of any dimension, e.g. whole volumes.
pub fn psnr_arrays<S1, S2, D>(
    a: &ArrayBase<S1, D>,
    b: &ArrayBase<S2, D>,
    p: &MetricParams,
) -> Result<Psnr>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    p.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("psnr of empty arrays".into()));
    }
    let sse = Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    if sse == 0.0 {
        return Ok(Psnr::Identical);
    }
    let mse = sse / a.len() as f64;
    Ok(Psnr::Db(10.0 * (p.data_range * p.data_range / mse).log10()))
}

/// Mean structural similarity over all fully contained Gaussian windows.
pub fn ssim(a: &SliceImage, b: &SliceImage, p: &MetricParams) -> Result<f64> {
    ssim_arrays(a.pixels().view(), b.pixels().view(), p)
}

pub fn ssim_arrays(a: ArrayView2<f64>, b: ArrayView2<f64>, p: &MetricParams) -> Result<f64> {
    p.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim operands differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h < p.ssim_window || w < p.ssim_window {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {0}x{0} ssim window",
            p.ssim_window
        )));
    }
    let g = p.gaussian_window();
    let c1 = (p.ssim_k1 * p.data_range).powi(2);
    let c2 = (p.ssim_k2 * p.data_range).powi(2);
    let aa = &a * &a;
    let bb = &b * &b;
    let ab = &a * &b;
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let e_aa = filter_valid(aa.view(), &g);
    let e_bb = filter_valid(bb.view(), &g);
    let e_ab = filter_valid(ab.view(), &g);
    let mut total = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&e_aa)
        .and(&e_bb)
        .and(&e_ab)
        .for_each(|&ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s.clamp(-1.0, 1.0);
        });
    Ok(total / mu_a.len() as f64)
}

/// Separable correlation with `g`, keeping only positions where the window
/// lies fully inside the image.
fn filter_valid(x: ArrayView2<f64>, g: &Array1<f64>) -> Array2<f64> {
    let k = g.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((oh, w));
    for (t, &gt) in g.iter().enumerate() {
        rows.scaled_add(gt, &x.slice(ndarray::s![t..t + oh, ..]));
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for (t, &gt) in g.iter().enumerate() {
        out.scaled_add(gt, &rows.slice(ndarray::s![.., t..t + ow]));
    }
    out
}
