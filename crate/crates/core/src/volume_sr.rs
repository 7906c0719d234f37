//! Through-plane volume super-resolution: both stacks of `H x D` and
//! `W x D` slices are super-resolved along depth, restacked, and averaged.

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataset::{extract_throughplane_slices, stack_throughplane_slices, ThroughAxis, Volume};
use crate::error::{Error, Result};
use crate::model::SuperResolver;

/// A volume and the depth-only model that enlarges it.
pub struct VolumeSrPlan<'a> {
    pub depth_factor: usize,
    pub resolver: &'a dyn SuperResolver,
    pub volume: &'a Volume,
}

impl VolumeSrPlan<'_> {
    pub fn validate(&self) -> Result<()> {
        check_resolver(self.resolver, Some(self.depth_factor)).map(|_| ())
    }
}

pub struct Experiment3Output {
    pub fused: Volume,
    /// Stack rebuilt from `H x D` slices.
    pub from_hd: Volume,
    /// Stack rebuilt from `W x D` slices.
    pub from_wd: Volume,
}

fn check_resolver(r: &dyn SuperResolver, depth_factor: Option<usize>) -> Result<usize> {
    let (fh, fw) = r.factors();
    if fw != 1 {
        return Err(Error::Plan(format!(
            "generator upscales ({fh}, {fw}); through-plane use needs a single upscaled axis"
        )));
    }
    if let Some(f) = depth_factor {
        if f != fh {
            return Err(Error::Plan(format!(
                "plan asks for depth x{f} but the generator upscales x{fh}"
            )));
        }
    }
    Ok(fh)
}

/// Super-resolves every through-plane slice of `v` along `axis`. Each
/// `H x D` (or `W x D`) slice is transposed so depth becomes the upscaled
/// first axis, enlarged, transposed back, and the results are restacked.
pub fn superresolve_stack(
    v: &Volume,
    axis: ThroughAxis,
    resolver: &dyn SuperResolver,
) -> Result<Volume> {
    let f = check_resolver(resolver, None)?;
    let slices = extract_throughplane_slices(v, axis)?;
    let sr: Vec<Array2<f64>> = slices
        .par_iter()
        .map(|s| {
            let out = resolver.super_resolve(&s.transposed())?;
            let (rows, cols) = s.dim();
            if out.dim() != (cols * f, rows) {
                return Err(Error::Plan(format!(
                    "generator produced {:?} for a {:?} slice, expected {:?}",
                    out.dim(),
                    (cols, rows),
                    (cols * f, rows)
                )));
            }
            Ok(out.transposed().into_pixels())
        })
        .collect::<Result<_>>()?;
    let voxels = stack_throughplane_slices(&sr, axis)?;
    let [sh, sw, sd] = v.spacing();
    v.with_voxels(voxels, [sh, sw, sd / f as f64])
}

/// Voxel-wise mean of two volumes on the same grid.
pub fn fuse_volumes(a: &Volume, b: &Volume) -> Result<Volume> {
    if a.dim() != b.dim() {
        return Err(Error::Fuse(format!(
            "shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.spacing() != b.spacing() {
        return Err(Error::Fuse(format!(
            "spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    let voxels = (a.voxels() + b.voxels()) * 0.5;
    a.with_voxels(voxels, a.spacing())
}

pub fn run_experiment3(plan: &VolumeSrPlan<'_>) -> Result<Experiment3Output> {
    plan.validate()?;
    let from_hd = superresolve_stack(plan.volume, ThroughAxis::Hd, plan.resolver)?;
    let from_wd = superresolve_stack(plan.volume, ThroughAxis::Wd, plan.resolver)?;
    let fused = fuse_volumes(&from_hd, &from_wd)?;
    Ok(Experiment3Output {
        fused,
        from_hd,
        from_wd,
    })
}
