use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File extension of the portable volume format.
pub const VOLUME_EXTENSION: &str = "vol";

const FORMAT_TAG: &str = "mrsr-volume";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionPlane {
    #[default]
    Axial,
    Sagittal,
    Coronal,
}

/// A scalar grid indexed `[h, w, d]` with spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Array3<f64>,
    spacing: [f64; 3],
    patient_id: String,
    acquisition_plane: AcquisitionPlane,
}

impl Volume {
    pub fn new(
        voxels: Array3<f64>,
        spacing: [f64; 3],
        patient_id: impl Into<String>,
        acquisition_plane: AcquisitionPlane,
    ) -> Result<Self> {
        let (h, w, d) = voxels.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Shape(format!(
                "volume must be non-empty, got {h}x{w}x{d}"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "volume contains non-finite intensities".into(),
            ));
        }
        Ok(Volume {
            voxels,
            spacing,
            patient_id: patient_id.into(),
            acquisition_plane,
        })
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<f64> {
        self.voxels
    }

    /// `(H, W, D)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn acquisition_plane(&self) -> AcquisitionPlane {
        self.acquisition_plane
    }

    /// Same metadata, new grid and spacing.
    pub fn with_voxels(&self, voxels: Array3<f64>, spacing: [f64; 3]) -> Result<Volume> {
        Volume::new(
            voxels,
            spacing,
            self.patient_id.clone(),
            self.acquisition_plane,
        )
    }

    /// Writes the portable format: one JSON header line followed by the
    /// raw little-endian `f64` grid in `[h][w][d]` row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w, d) = self.dim();
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            height: h,
            width: w,
            depth: d,
            spacing: self.spacing,
            patient_id: self.patient_id.clone(),
            acquisition_plane: self.acquisition_plane,
            dtype: Dtype::F64,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let line = serde_json::to_string(&header).expect("header serializes");
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
            for v in self.voxels.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Volume> {
        let file =
            File::open(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Ingest(format!("{}: bad header: {e}", path.display())))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Ingest(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                header.format,
                header.version
            )));
        }
        let n = header.height * header.width * header.depth;
        let mut raw = Vec::new();
        reader
            .read_to_end(&mut raw)
            .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let width = header.dtype.width();
        if raw.len() != n * width {
            return Err(Error::Ingest(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                n * width,
                raw.len()
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(width)
            .map(|c| header.dtype.decode(c))
            .collect();
        let voxels = Array3::from_shape_vec((header.height, header.width, header.depth), data)
            .map_err(|e| Error::Ingest(e.to_string()))?;
        Volume::new(
            voxels,
            header.spacing,
            header.patient_id,
            header.acquisition_plane,
        )
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    U8,
    U16,
    I16,
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 | Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Dtype::U8 => f64::from(b[0]),
            Dtype::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Dtype::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Dtype::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8-byte chunk")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    depth: usize,
    spacing: [f64; 3],
    patient_id: String,
    #[serde(default)]
    acquisition_plane: AcquisitionPlane,
    dtype: Dtype,
}

/// Loads a DICOM series directory or a portable `.vol` file.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        super::dicom::load_dicom_series(path)
    } else if path.is_file() {
        if path.extension().and_then(|e| e.to_str()) == Some(VOLUME_EXTENSION) {
            Volume::load(path)
        } else {
            Err(Error::Ingest(format!(
                "{}: expected a DICOM series directory or a .{VOLUME_EXTENSION} file",
                path.display()
            )))
        }
    } else {
        Err(Error::Ingest(format!(
            "{}: no such file or directory",
            path.display()
        )))
    }
}

/// Per-volume min-max scaling to `[0, 1]`. A constant volume maps to zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    if v.voxels.iter().any(|x| !x.is_finite()) {
        return Err(Error::Normalize("non-finite intensity".into()));
    }
    let (lo, hi) = v
        .voxels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = hi - lo;
    let voxels = if range > 0.0 {
        // the final clamp absorbs rounding in (x - lo) / range
        v.voxels.mapv(|x| ((x - lo) / range).clamp(0.0, 1.0))
    } else {
        Array3::zeros(v.voxels.raw_dim())
    };
    v.with_voxels(voxels, v.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(data: Array3<f64>) -> Volume {
        Volume::new(data, [0.5, 0.5, 3.0], "p0", AcquisitionPlane::Axial).unwrap()
    }

    #[test]
    fn portable_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        let v = vol(Array::from_shape_fn((4, 4, 3), |(i, j, k)| {
            (i * 100 + j * 10 + k) as f64 - 7.25
        }));
        v.save(&path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dim(), (4, 4, 3));
        assert_eq!(back, v);
    }

    #[test]
    fn truncated_file_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        vol(Array3::zeros((2, 2, 2))).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Ingest(_))));
        assert!(matches!(
            load_volume(&dir.path().join("missing.vol")),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn invariants_enforced() {
        assert!(Volume::new(
            Array3::zeros((0, 1, 1)),
            [1.0; 3],
            "p",
            AcquisitionPlane::Axial
        )
        .is_err());
        assert!(Volume::new(
            Array3::zeros((1, 1, 1)),
            [1.0, 0.0, 1.0],
            "p",
            AcquisitionPlane::Axial
        )
        .is_err());
        let mut a = Array3::zeros((1, 1, 2));
        a[[0, 0, 1]] = f64::NAN;
        assert!(Volume::new(a, [1.0; 3], "p", AcquisitionPlane::Axial).is_err());
    }

    #[test]
    fn min_max_scaling() {
        let v = vol(Array3::from_shape_vec((1, 1, 3), vec![10.0, 20.0, 30.0]).unwrap());
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.voxels().as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_volume_maps_to_zero() {
        let v = vol(Array3::from_elem((2, 2, 2), 7.0));
        let n = normalize_intensity(&v).unwrap();
        assert!(n.voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_volume_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = vol(Array3::from_shape_fn((8, 8, 4), |_| {
            rng.gen_range(-500.0..2500.0)
        }));
        let n = normalize_intensity(&v).unwrap();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for &x in n.voxels() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        let again = normalize_intensity(&n).unwrap();
        assert_eq!(again, n);
    }
}
