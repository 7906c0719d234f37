//! Canonical 2D image form used by every stage of the pipeline.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which cut of the source volume a slice came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicePlane {
    /// Acquisition plane, `H x W`, indexed by depth.
    InPlane,
    /// Height-by-depth cut, `H x D`, indexed by width.
    ThroughHd,
    /// Width-by-depth cut, `W x D`, indexed by height.
    ThroughWd,
}

impl fmt::Display for SlicePlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlicePlane::InPlane => "in_plane",
            SlicePlane::ThroughHd => "through_hd",
            SlicePlane::ThroughWd => "through_wd",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    pub plane: SlicePlane,
    pub index: usize,
}

impl Provenance {
    pub fn synthetic(index: usize) -> Self {
        Provenance {
            volume_id: String::from("synthetic"),
            plane: SlicePlane::InPlane,
            index,
        }
    }
}

/// A grayscale image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pixels: Array2<f64>,
    provenance: Provenance,
}

impl SliceImage {
    /// Validates the `[0, 1]` and non-empty invariants.
    pub fn new(pixels: Array2<f64>, provenance: Provenance) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "slice image must be non-empty, got {h}x{w}"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(SliceImage { pixels, provenance })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(mut pixels: Array2<f64>, provenance: Provenance) -> Result<Self> {
        pixels.mapv_inplace(clamp_unit);
        Self::new(pixels, provenance)
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Swaps the two axes. Provenance is kept.
    pub fn transposed(&self) -> SliceImage {
        SliceImage {
            pixels: self.pixels.t().to_owned(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    /// 8-bit grayscale PNG export. Lossy; meant for inspection only.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dim();
        let buf: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Shape("png buffer size mismatch".into()))?;
        img.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    /// Reads an 8- or 16-bit grayscale PNG (colour images are converted to
    /// luma) and rescales it to `[0, 1]` by the bit depth's maximum.
    pub fn load_png(path: &Path) -> Result<SliceImage> {
        let img =
            image::open(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        let data: Vec<f64> = luma
            .as_raw()
            .iter()
            .map(|&v| f64::from(v) / 65535.0)
            .collect();
        let pixels = Array2::from_shape_vec((h as usize, w as usize), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        SliceImage::new(
            pixels,
            Provenance {
                volume_id: id,
                plane: SlicePlane::InPlane,
                index: 0,
            },
        )
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn to_u8(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Horizontally concatenates images of equal height, padding shorter ones
/// with zeros at the bottom. Used for LR | bicubic | SR | HR panels.
pub fn side_by_side(panels: &[&SliceImage]) -> Result<SliceImage> {
    if panels.is_empty() {
        return Err(Error::Shape("no panels to join".into()));
    }
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let w: usize = panels.iter().map(|p| p.width()).sum();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut x0 = 0;
    for p in panels {
        let (ph, pw) = p.dim();
        out.slice_mut(ndarray::s![..ph, x0..x0 + pw])
            .assign(p.pixels());
        x0 += pw;
    }
    SliceImage::new(out, panels[0].provenance().clone())
}
