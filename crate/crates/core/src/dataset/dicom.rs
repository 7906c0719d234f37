//! DICOM series ingestion for uncompressed single-frame grayscale images.

use std::path::{Path, PathBuf};

use dicom_core::value::PrimitiveValue;
use dicom_core::{DataElement, VR};
use dicom_dictionary_std::{tags, uids};
use dicom_object::{open_file, DefaultDicomObject, FileMetaTableBuilder, InMemDicomObject};
use ndarray::Array3;

use super::volume::{AcquisitionPlane, Volume};
use crate::error::{Error, Result};

const NATIVE_SYNTAXES: [&str; 2] = [
    uids::EXPLICIT_VR_LITTLE_ENDIAN,
    uids::IMPLICIT_VR_LITTLE_ENDIAN,
];

struct SliceFile {
    path: PathBuf,
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    position: Option<[f64; 3]>,
    orientation: Option<[f64; 6]>,
    instance: Option<i64>,
    pixel_spacing: Option<[f64; 2]>,
    slice_spacing: Option<f64>,
    patient_id: String,
}

fn ingest(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Ingest(format!("{}: {what}", path.display()))
}

fn floats(obj: &DefaultDicomObject, tag: dicom_core::Tag) -> Option<Vec<f64>> {
    obj.get(tag).and_then(|e| e.to_multi_float64().ok())
}

fn read_slice(path: &Path) -> Result<SliceFile> {
    let obj = open_file(path).map_err(|e| ingest(path, e))?;
    let ts = obj.meta().transfer_syntax().trim_end_matches('\0');
    if !NATIVE_SYNTAXES.contains(&ts) {
        return Err(ingest(path, format!("unsupported transfer syntax {ts}")));
    }
    let int = |tag, name: &str| -> Result<i64> {
        obj.element(tag)
            .map_err(|e| ingest(path, format!("{name}: {e}")))?
            .to_int::<i64>()
            .map_err(|e| ingest(path, format!("{name}: {e}")))
    };
    let rows = int(tags::ROWS, "Rows")? as usize;
    let cols = int(tags::COLUMNS, "Columns")? as usize;
    let bits = int(tags::BITS_ALLOCATED, "BitsAllocated")?;
    let signed = obj
        .get(tags::PIXEL_REPRESENTATION)
        .and_then(|e| e.to_int::<i64>().ok())
        .unwrap_or(0)
        == 1;
    let samples = obj
        .get(tags::SAMPLES_PER_PIXEL)
        .and_then(|e| e.to_int::<i64>().ok())
        .unwrap_or(1);
    if samples != 1 {
        return Err(ingest(
            path,
            "only single-sample grayscale images are supported",
        ));
    }
    let data = obj
        .element(tags::PIXEL_DATA)
        .map_err(|e| ingest(path, e))?
        .to_bytes()
        .map_err(|e| ingest(path, e))?;
    let n = rows * cols;
    let pixels: Vec<f64> = match (bits, signed) {
        (8, _) if data.len() >= n => data[..n].iter().map(|&b| f64::from(b)).collect(),
        (16, false) if data.len() >= 2 * n => data[..2 * n]
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        (16, true) if data.len() >= 2 * n => data[..2 * n]
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        (8 | 16, _) => return Err(ingest(path, "pixel data shorter than Rows x Columns")),
        _ => return Err(ingest(path, format!("unsupported BitsAllocated {bits}"))),
    };
    let fixed = |v: Option<Vec<f64>>, len: usize| v.filter(|v| v.len() >= len);
    Ok(SliceFile {
        path: path.to_path_buf(),
        rows,
        cols,
        pixels,
        position: fixed(floats(&obj, tags::IMAGE_POSITION_PATIENT), 3).map(|v| [v[0], v[1], v[2]]),
        orientation: fixed(floats(&obj, tags::IMAGE_ORIENTATION_PATIENT), 6)
            .map(|v| [v[0], v[1], v[2], v[3], v[4], v[5]]),
        instance: obj
            .get(tags::INSTANCE_NUMBER)
            .and_then(|e| e.to_int::<i64>().ok()),
        pixel_spacing: fixed(floats(&obj, tags::PIXEL_SPACING), 2).map(|v| [v[0], v[1]]),
        slice_spacing: floats(&obj, tags::SPACING_BETWEEN_SLICES)
            .or_else(|| floats(&obj, tags::SLICE_THICKNESS))
            .and_then(|v| v.first().copied()),
        patient_id: obj
            .get(tags::PATIENT_ID)
            .and_then(|e| e.to_str().ok())
            .map(|s| s.trim().trim_end_matches('\0').to_string())
            .unwrap_or_default(),
    })
}

fn slice_normal(o: &[f64; 6]) -> [f64; 3] {
    [
        o[1] * o[5] - o[2] * o[4],
        o[2] * o[3] - o[0] * o[5],
        o[0] * o[4] - o[1] * o[3],
    ]
}

fn plane_from_normal(n: [f64; 3]) -> AcquisitionPlane {
    let a = n.map(f64::abs);
    if a[2] >= a[0] && a[2] >= a[1] {
        AcquisitionPlane::Axial
    } else if a[0] >= a[1] {
        AcquisitionPlane::Sagittal
    } else {
        AcquisitionPlane::Coronal
    }
}

/// Reads every file in `dir` as one DICOM image and stacks them along depth.
///
/// Slices are ordered by position along the slice normal when geometry is
/// present, else by instance number, else by file name. Stored values are
/// kept as-is (no rescale slope/intercept).
pub fn load_dicom_series(dir: &Path) -> Result<Volume> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ingest(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !name.starts_with('.') && !name.eq_ignore_ascii_case("DICOMDIR")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ingest(dir, "no DICOM files in series directory"));
    }
    let mut slices = paths
        .iter()
        .map(|p| read_slice(p))
        .collect::<Result<Vec<_>>>()?;

    let (rows, cols) = (slices[0].rows, slices[0].cols);
    if let Some(bad) = slices.iter().find(|s| (s.rows, s.cols) != (rows, cols)) {
        return Err(ingest(
            &bad.path,
            format!(
                "slice is {}x{}, series is {rows}x{cols}",
                bad.rows, bad.cols
            ),
        ));
    }

    let normal = slices[0].orientation.map(|o| slice_normal(&o));
    let along = |s: &SliceFile| -> Option<f64> {
        let n = normal?;
        let p = s.position?;
        Some(p[0] * n[0] + p[1] * n[1] + p[2] * n[2])
    };
    if slices.iter().all(|s| along(s).is_some()) {
        slices.sort_by(|a, b| along(a).unwrap().total_cmp(&along(b).unwrap()));
    } else if slices.iter().all(|s| s.instance.is_some()) {
        slices.sort_by_key(|s| s.instance);
    }

    let depth = slices.len();
    let [sh, sw] = slices[0].pixel_spacing.unwrap_or([1.0, 1.0]);
    let measured = if depth > 1 {
        match (along(&slices[0]), along(&slices[1])) {
            (Some(a), Some(b)) if (b - a).abs() > 0.0 => Some((b - a).abs()),
            _ => None,
        }
    } else {
        None
    };
    let sd = measured.or(slices[0].slice_spacing).unwrap_or(1.0);

    let mut voxels = Array3::<f64>::zeros((rows, cols, depth));
    for (k, s) in slices.iter().enumerate() {
        for (idx, &v) in s.pixels.iter().enumerate() {
            voxels[[idx / cols, idx % cols, k]] = v;
        }
    }
    let plane = normal.map(plane_from_normal).unwrap_or_default();
    let patient = slices[0].patient_id.clone();
    Volume::new(voxels, [sh, sw, sd], patient, plane).map_err(|e| ingest(dir, e))
}

/// Writes `volume` as a series of 16-bit unsigned DICOM files, one per depth
/// index. Intensities are rounded and clamped to `u16`.
pub fn write_dicom_series(volume: &Volume, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, d) = volume.dim();
    let [sh, sw, sd] = volume.spacing();
    let orientation = match volume.acquisition_plane() {
        AcquisitionPlane::Axial => "1\\0\\0\\0\\1\\0",
        AcquisitionPlane::Sagittal => "0\\1\\0\\0\\0\\-1",
        AcquisitionPlane::Coronal => "1\\0\\0\\0\\0\\-1",
    };
    let o: Vec<f64> = orientation
        .split('\\')
        .map(|s| s.parse().unwrap())
        .collect();
    let n = slice_normal(&[o[0], o[1], o[2], o[3], o[4], o[5]]);
    let study = "1.2.826.0.1.3680043.10.543.1";
    for k in 0..d {
        let pixels: Vec<u16> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| volume.voxels()[[i, j, k]].round().clamp(0.0, 65535.0) as u16)
            .collect();
        let z = k as f64 * sd;
        let position = format!("{}\\{}\\{}", n[0] * z, n[1] * z, n[2] * z);
        let sop = format!("{study}.{}", k + 1);
        let obj = InMemDicomObject::from_element_iter([
            DataElement::new(
                tags::SOP_CLASS_UID,
                VR::UI,
                PrimitiveValue::from(uids::MR_IMAGE_STORAGE),
            ),
            DataElement::new(
                tags::SOP_INSTANCE_UID,
                VR::UI,
                PrimitiveValue::from(sop.as_str()),
            ),
            DataElement::new(tags::MODALITY, VR::CS, PrimitiveValue::from("MR")),
            DataElement::new(
                tags::PATIENT_ID,
                VR::LO,
                PrimitiveValue::from(volume.patient_id()),
            ),
            DataElement::new(
                tags::INSTANCE_NUMBER,
                VR::IS,
                PrimitiveValue::from((k + 1).to_string()),
            ),
            DataElement::new(
                tags::IMAGE_POSITION_PATIENT,
                VR::DS,
                PrimitiveValue::from(position.as_str()),
            ),
            DataElement::new(
                tags::IMAGE_ORIENTATION_PATIENT,
                VR::DS,
                PrimitiveValue::from(orientation),
            ),
            DataElement::new(
                tags::PIXEL_SPACING,
                VR::DS,
                PrimitiveValue::from(format!("{sh}\\{sw}").as_str()),
            ),
            DataElement::new(
                tags::SLICE_THICKNESS,
                VR::DS,
                PrimitiveValue::from(sd.to_string().as_str()),
            ),
            DataElement::new(tags::SAMPLES_PER_PIXEL, VR::US, PrimitiveValue::from(1_u16)),
            DataElement::new(
                tags::PHOTOMETRIC_INTERPRETATION,
                VR::CS,
                PrimitiveValue::from("MONOCHROME2"),
            ),
            DataElement::new(tags::ROWS, VR::US, PrimitiveValue::from(h as u16)),
            DataElement::new(tags::COLUMNS, VR::US, PrimitiveValue::from(w as u16)),
            DataElement::new(tags::BITS_ALLOCATED, VR::US, PrimitiveValue::from(16_u16)),
            DataElement::new(tags::BITS_STORED, VR::US, PrimitiveValue::from(16_u16)),
            DataElement::new(tags::HIGH_BIT, VR::US, PrimitiveValue::from(15_u16)),
            DataElement::new(
                tags::PIXEL_REPRESENTATION,
                VR::US,
                PrimitiveValue::from(0_u16),
            ),
            DataElement::new(tags::PIXEL_DATA, VR::OW, PrimitiveValue::U16(pixels.into())),
        ]);
        let file = obj
            .with_meta(FileMetaTableBuilder::new().transfer_syntax(uids::EXPLICIT_VR_LITTLE_ENDIAN))
            .map_err(|e| Error::Ingest(e.to_string()))?;
        let path = dir.join(format!("slice_{:04}.dcm", k));
        file.write_to_file(&path)
            .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
