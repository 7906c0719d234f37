use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::image::{Provenance, SliceImage, SlicePlane};

/// Through-plane cut direction. Depth is always the second image axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThroughAxis {
    /// `H x D` slices, one per width index.
    Hd,
    /// `W x D` slices, one per height index.
    Wd,
}

impl ThroughAxis {
    pub const BOTH: [ThroughAxis; 2] = [ThroughAxis::Hd, ThroughAxis::Wd];

    pub fn plane(self) -> SlicePlane {
        match self {
            ThroughAxis::Hd => SlicePlane::ThroughHd,
            ThroughAxis::Wd => SlicePlane::ThroughWd,
        }
    }

    /// Volume axis the slices are indexed along.
    fn stack_axis(self) -> Axis {
        match self {
            ThroughAxis::Hd => Axis(1),
            ThroughAxis::Wd => Axis(0),
        }
    }
}

fn provenance(v: &Volume, plane: SlicePlane, index: usize) -> Provenance {
    Provenance {
        volume_id: v.patient_id().to_string(),
        plane,
        index,
    }
}

/// `D` slices of `H x W`. Requires a normalized volume.
pub fn extract_inplane_slices(v: &Volume) -> Result<Vec<SliceImage>> {
    v.voxels()
        .axis_iter(Axis(2))
        .enumerate()
        .map(|(k, plane)| SliceImage::new(plane.to_owned(), provenance(v, SlicePlane::InPlane, k)))
        .collect()
}

pub fn extract_throughplane_slices(v: &Volume, axis: ThroughAxis) -> Result<Vec<SliceImage>> {
    v.voxels()
        .axis_iter(axis.stack_axis())
        .enumerate()
        .map(|(k, plane)| SliceImage::new(plane.to_owned(), provenance(v, axis.plane(), k)))
        .collect()
}

fn stack(images: &[Array2<f64>], axis: Axis) -> Result<Array3<f64>> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(axis, &views).map_err(|e| Error::Shape(format!("cannot stack slices: {e}")))
}

/// Inverse of [`extract_throughplane_slices`]: rebuilds the `[h, w, d]` grid.
pub fn stack_throughplane_slices(slices: &[Array2<f64>], axis: ThroughAxis) -> Result<Array3<f64>> {
    stack(slices, axis.stack_axis())
}

pub fn stack_inplane_slices(slices: &[Array2<f64>]) -> Result<Array3<f64>> {
    stack(slices, Axis(2))
}

/// Centre crop along axes that are too large, symmetric zero padding along
/// axes that are too small. Odd remainders go to the bottom/right.
pub fn crop_or_pad(img: &SliceImage, target_h: usize, target_w: usize) -> Result<SliceImage> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Shape(format!(
            "target {target_h}x{target_w} must be non-empty"
        )));
    }
    let (h, w) = img.dim();
    let span = |src: usize, dst: usize| -> (usize, usize, usize) {
        // (src offset, dst offset, length)
        if src >= dst {
            ((src - dst) / 2, 0, dst)
        } else {
            (0, (dst - src) / 2, src)
        }
    };
    let (sy, dy, ly) = span(h, target_h);
    let (sx, dx, lx) = span(w, target_w);
    let mut out = Array2::<f64>::zeros((target_h, target_w));
    out.slice_mut(s![dy..dy + ly, dx..dx + lx])
        .assign(&img.pixels().slice(s![sy..sy + ly, sx..sx + lx]));
    SliceImage::new(out, img.provenance().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::volume::AcquisitionPlane;
    use ndarray::Array;

    fn ramp_volume(h: usize, w: usize, d: usize) -> Volume {
        let n = (h * w * d) as f64;
        let a = Array::from_shape_fn((h, w, d), |(i, j, k)| ((i * w + j) * d + k) as f64 / n);
        Volume::new(a, [1.0, 1.0, 4.0], "pt", AcquisitionPlane::Axial).unwrap()
    }

    #[test]
    fn inplane_geometry() {
        let v = ramp_volume(320, 320, 26);
        let s = extract_inplane_slices(&v).unwrap();
        assert_eq!(s.len(), 26);
        assert!(s.iter().all(|x| x.dim() == (320, 320)));
        assert_eq!(
            s.iter().map(|x| x.pixels().len()).sum::<usize>(),
            320 * 320 * 26
        );
        for (k, img) in s.iter().enumerate() {
            assert_eq!(img.provenance().index, k);
            assert_eq!(img.pixels(), &v.voxels().slice(s![.., .., k]));
        }
    }

    #[test]
    fn single_plane_volume() {
        let v = ramp_volume(4, 4, 1);
        let s = extract_inplane_slices(&v).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].pixels(), &v.voxels().index_axis(Axis(2), 0));
    }

    #[test]
    fn throughplane_geometry() {
        let v = ramp_volume(320, 320, 26);
        for axis in ThroughAxis::BOTH {
            let s = extract_throughplane_slices(&v, axis).unwrap();
            assert_eq!(s.len(), 320);
            assert!(s.iter().all(|x| x.dim() == (320, 26)));
        }
        let v = ramp_volume(5, 7, 3);
        let hd = extract_throughplane_slices(&v, ThroughAxis::Hd).unwrap();
        assert_eq!(hd.len(), 7);
        assert_eq!(hd[2].dim(), (5, 3));
        assert_eq!(hd[2].pixels()[[4, 1]], v.voxels()[[4, 2, 1]]);
        let wd = extract_throughplane_slices(&v, ThroughAxis::Wd).unwrap();
        assert_eq!(wd.len(), 5);
        assert_eq!(wd[3].dim(), (7, 3));
        assert_eq!(wd[3].pixels()[[6, 2]], v.voxels()[[3, 6, 2]]);
    }

    #[test]
    fn unnormalized_volume_rejected() {
        let v = Volume::new(
            Array3::from_elem((2, 2, 2), 5.0),
            [1.0; 3],
            "p",
            AcquisitionPlane::Axial,
        )
        .unwrap();
        assert!(extract_inplane_slices(&v).is_err());
    }

    #[test]
    fn crop_and_pad() {
        let img = |h, w| {
            SliceImage::new(Array2::from_elem((h, w), 0.5), Provenance::synthetic(0)).unwrap()
        };
        let big = SliceImage::new(
            Array2::from_shape_fn((320, 320), |(i, j)| ((i * 320 + j) as f64) / 102400.0),
            Provenance::synthetic(0),
        )
        .unwrap();
        let c = crop_or_pad(&big, 224, 224).unwrap();
        assert_eq!(c.dim(), (224, 224));
        assert_eq!(c.pixels()[[0, 0]], big.pixels()[[48, 48]]);
        assert_eq!(c.pixels()[[223, 223]], big.pixels()[[271, 271]]);

        let same = img(224, 224);
        assert_eq!(crop_or_pad(&same, 224, 224).unwrap(), same);

        let p = crop_or_pad(&img(100, 224), 224, 224).unwrap();
        let rows_zero = |r: usize| p.pixels().row(r).iter().all(|&v| v == 0.0);
        assert!((0..62).all(rows_zero));
        assert!((162..224).all(rows_zero));
        assert!((62..162).all(|r| !rows_zero(r)));
        assert!(crop_or_pad(&same, 0, 4).is_err());
    }
}
