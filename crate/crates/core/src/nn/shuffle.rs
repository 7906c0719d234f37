//! Sub-pixel rearrangement with independent height and width factors.

use super::Tensor;
use crate::error::{Error, Result};

/// `(n, c*rh*rw, h, w) -> (n, c, h*rh, w*rw)` with
/// `out[n, c, y*rh + i, x*rw + j] = in[n, c*rh*rw + i*rw + j, y, x]`.
///
/// With `rw == 1` this upscales the height axis only.
pub fn pixel_shuffle_aniso(x: &Tensor, rh: usize, rw: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.dim();
    if rh == 0 || rw == 0 {
        return Err(Error::Shape(format!(
            "shuffle factors must be >= 1, got ({rh}, {rw})"
        )));
    }
    let group = rh * rw;
    if cin % group != 0 {
        return Err(Error::Shape(format!(
            "{cin} channels are not divisible by rh*rw = {group}"
        )));
    }
    let c = cin / group;
    Ok(Tensor::from_shape_fn(
        (n, c, h * rh, w * rw),
        |(b, ch, oy, ox)| {
            let (y, i) = (oy / rh, oy % rh);
            let (xx, j) = (ox / rw, ox % rw);
            x[[b, ch * group + i * rw + j, y, xx]]
        },
    ))
}

/// Inverse of [`pixel_shuffle_aniso`]; also its backward pass.
pub fn pixel_unshuffle_aniso(y: &Tensor, rh: usize, rw: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = y.dim();
    if rh == 0 || rw == 0 || oh % rh != 0 || ow % rw != 0 {
        return Err(Error::Shape(format!(
            "{oh}x{ow} cannot be unshuffled by ({rh}, {rw})"
        )));
    }
    let group = rh * rw;
    Ok(Tensor::from_shape_fn(
        (n, c * group, oh / rh, ow / rw),
        |(b, cin, y0, x0)| {
            let (ch, r) = (cin / group, cin % group);
            let (i, j) = (r / rw, r % rw);
            y[[b, ch, y0 * rh + i, x0 * rw + j]]
        },
    ))
}
