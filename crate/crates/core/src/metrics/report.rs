use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{psnr, ssim, MetricParams, Psnr};
use crate::degradation::{bicubic_upsample_with, downsample, DegradationSpec};
use crate::error::{Error, Result};
use crate::image::SliceImage;
use crate::model::SuperResolver;

pub type SrFn<'a> = Box<dyn Fn(&SliceImage) -> Result<SliceImage> + Send + Sync + 'a>;

/// A named way of producing an SR image: degrade HR with `degradation`, then
/// map the LR image back to the HR grid with `sr`.
pub struct EvalMethod<'a> {
    pub name: String,
    pub degradation: DegradationSpec,
    pub sr: SrFn<'a>,
}

impl<'a> EvalMethod<'a> {
    pub fn new(name: impl Into<String>, degradation: DegradationSpec, sr: SrFn<'a>) -> Self {
        EvalMethod {
            name: name.into(),
            degradation,
            sr,
        }
    }

    /// Bicubic enlargement by the degradation factors.
    pub fn bicubic(name: impl Into<String>, degradation: DegradationSpec) -> EvalMethod<'static> {
        let spec = degradation;
        EvalMethod {
            name: name.into(),
            degradation,
            sr: Box::new(move |lr| {
                bicubic_upsample_with(lr, spec.factor_h, spec.factor_w, &spec.resample)
            }),
        }
    }

    pub fn model(
        name: impl Into<String>,
        degradation: DegradationSpec,
        model: &'a dyn SuperResolver,
    ) -> Self {
        EvalMethod {
            name: name.into(),
            degradation,
            sr: Box::new(move |lr| model.super_resolve(lr)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub method: String,
    pub image_id: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method_name: String,
    /// Mean over images with a finite PSNR; `None` when every image was
    /// reproduced exactly.
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
    pub n_images: usize,
    pub n_identical: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub params: MetricParams,
    pub rows: Vec<MethodRow>,
    pub per_image: Vec<ImageMetric>,
}

fn image_id(img: &SliceImage, position: usize) -> String {
    let p = img.provenance();
    format!("{}/{}/{:05}#{position:06}", p.volume_id, p.plane, p.index)
}

/// Scores every method on every HR image. Rows follow the order of
/// `methods`; per-image records are sorted by image id within each method.
pub fn evaluate_methods(
    test_set: &[SliceImage],
    methods: &[EvalMethod<'_>],
    p: &MetricParams,
) -> Result<MetricsReport> {
    p.validate()?;
    if test_set.is_empty() {
        return Err(Error::Eval {
            method: "*".into(),
            reason: "empty test set".into(),
        });
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(methods.len());
    let mut per_image = Vec::new();
    for m in methods {
        let eval_err = |reason: String| Error::Eval {
            method: m.name.clone(),
            reason,
        };
        m.degradation.validate()?;
        let mut metrics: Vec<ImageMetric> = test_set
            .par_iter()
            .enumerate()
            .map(|(i, hr)| {
                let lr = downsample(hr, &m.degradation).map_err(|e| eval_err(e.to_string()))?;
                let sr = (m.sr)(&lr).map_err(|e| eval_err(e.to_string()))?;
                if sr.dim() != hr.dim() {
                    return Err(eval_err(format!(
                        "output {:?} does not match HR {:?}",
                        sr.dim(),
                        hr.dim()
                    )));
                }
                Ok(ImageMetric {
                    method: m.name.clone(),
                    image_id: image_id(hr, i),
                    psnr: psnr(&sr, hr, p)?,
                    ssim: ssim(&sr, hr, p)?,
                })
            })
            .collect::<Result<_>>()?;
        metrics.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        rows.push(summarise(&m.name, &metrics));
        per_image.extend(metrics);
    }
    Ok(MetricsReport {
        params: *p,
        rows,
        per_image,
    })
}

fn summarise(name: &str, metrics: &[ImageMetric]) -> MethodRow {
    let finite: Vec<f64> = metrics.iter().filter_map(|m| m.psnr.db()).collect();
    let mean_psnr_db =
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    MethodRow {
        method_name: name.to_string(),
        mean_psnr_db,
        mean_ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / metrics.len() as f64,
        n_images: metrics.len(),
        n_identical: metrics.len() - finite.len(),
    }
}

impl MetricsReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method_name == method)
    }

    /// Methods as columns, PSNR and SSIM as rows.
    pub fn to_table(&self) -> String {
        let headers: Vec<&str> = self.rows.iter().map(|r| r.method_name.as_str()).collect();
        let psnr: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                r.mean_psnr_db
                    .map_or_else(|| "identical".to_string(), |v| format!("{v:.2}"))
            })
            .collect();
        let ssim: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{:.2}", r.mean_ssim))
            .collect();
        let count: Vec<String> = self.rows.iter().map(|r| r.n_images.to_string()).collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|i| headers[i].len().max(psnr[i].len()).max(ssim[i].len()))
            .collect();
        let label_w = "PSNR (dB)".len();
        let mut out = String::new();
        let mut line = |label: &str, cells: &[String]| {
            let _ = write!(out, "{label:<label_w$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, " | {c:>w$}");
            }
            out.push('\n');
        };
        line(
            "",
            &headers.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        );
        line("PSNR (dB)", &psnr);
        line("SSIM", &ssim);
        line("Images", &count);
        out
    }

    /// Writes `report.json`, `report.txt` and `per_image.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serialises");
        let path = dir.join("report.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("report.txt");
        fs::write(&path, self.to_table()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("per_image.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for m in &self.per_image {
            writeln!(
                f,
                "{}",
                serde_json::to_string(m).expect("metric serialises")
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
