use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Ix1};
use rand::Rng;
use rayon::prelude::*;

use super::{fan_in_bound, Grads, ParamId, ParamStore, Tensor};

/// Upper bound on the number of elements in one im2col buffer. Large images
/// are processed in bands of output rows to stay below it.
const COLS_BUDGET: usize = 1 << 22;

/// Weight-matrix and bias gradients for one sample.
type ParamGrads = (Array2<f64>, Array1<f64>);

/// Layers with at most this many filters are computed directly: im2col
/// would copy one input value per multiply-accumulate.
const DIRECT_MAX_OUT: usize = 8;

/// Square-kernel 2D convolution with bias and `kernel / 2` zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        (COLS_BUDGET / (self.ckk() * self.ow).max(1)).clamp(1, self.oh.max(1))
    }

    fn im2col(&self, x: &[f64], r0: usize, r1: usize) -> Array2<f64> {
        let Geometry {
            c,
            h,
            w,
            k,
            s,
            p,
            ow,
            ..
        } = *self;
        let ncols = (r1 - r0) * ow;
        let mut cols = vec![0.0; self.ckk() * ncols];
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let d = &mut dst[ri * ow..(ri + 1) * ow];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((self.ckk(), ncols), cols).expect("im2col shape")
    }

    fn direct(
        &self,
        x: &[f64],
        wm: &ArrayView2<f64>,
        bias: &ndarray::ArrayView1<f64>,
        out: &mut Array3<f64>,
    ) {
        let Geometry {
            c,
            h,
            w,
            k,
            s,
            p,
            oh,
            ow,
        } = *self;
        for (o, mut plane) in out.outer_iter_mut().enumerate() {
            plane.fill(bias[o]);
            let dst = plane.as_slice_mut().expect("contiguous plane");
            for ci in 0..c {
                let src = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wm[[o, (ci * k + ky) * k + kx]];
                        // Output columns whose input column lies inside the image.
                        let lo = p.saturating_sub(kx).div_ceil(s);
                        let hi = ((w + p).saturating_sub(kx)).div_ceil(s).min(ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let d = &mut dst[oy * ow + lo..oy * ow + hi];
                            if s == 1 {
                                let start = lo + kx - p;
                                for (dv, xv) in d.iter_mut().zip(&row[start..start + (hi - lo)]) {
                                    *dv += wv * xv;
                                }
                            } else {
                                for (j, dv) in d.iter_mut().enumerate() {
                                    *dv += wv * row[(lo + j) * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &Array2<f64>, gx: &mut [f64], r0: usize, r1: usize) {
        let Geometry {
            c,
            h,
            w,
            k,
            s,
            p,
            ow,
            ..
        } = *self;
        let cols = cols.as_standard_layout();
        let cols = cols.as_slice().expect("standard layout");
        let ncols = (r1 - r0) * ow;
        for ci in 0..c {
            let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in src[ri * ow..(ri + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = fan_in_bound(in_ch * kernel * kernel);
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            bound,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[out_ch], bound, rng);
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    /// Registers existing weights `(out, in, k, k)` and bias `(out)`.
    pub fn from_arrays(
        store: &mut ParamStore,
        name: &str,
        weight: ndarray::Array4<f64>,
        bias: Array1<f64>,
        stride: usize,
        trainable: bool,
    ) -> Result<Self, String> {
        let (out_ch, in_ch, kh, kw) = weight.dim();
        if kh != kw || kh % 2 == 0 {
            return Err(format!(
                "{name}: kernel must be square and odd, got {kh}x{kw}"
            ));
        }
        if bias.len() != out_ch {
            return Err(format!(
                "{name}: bias has {} entries for {out_ch} filters",
                bias.len()
            ));
        }
        if stride == 0 {
            return Err(format!("{name}: stride must be positive"));
        }
        let weight = store.add(format!("{name}.weight"), weight.into_dyn(), trainable);
        let bias = store.add(format!("{name}.bias"), bias.into_dyn(), trainable);
        Ok(Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel: kh,
            stride,
            padding: kh / 2,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        let (_, c, h, w) = x.dim();
        assert_eq!(
            c, self.in_ch,
            "conv expects {} input channels, got {c}",
            self.in_ch
        );
        let (oh, ow) = self.out_hw(h, w);
        Geometry {
            c,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            oh,
            ow,
        }
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("conv weight layout")
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let g = self.geometry(x);
        let x = x.as_standard_layout();
        let wm = self.weight_matrix(store);
        let bias = store
            .get(self.bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias is 1-d");
        let n = x.len_of(Axis(0));
        let per_sample: Vec<Array3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.index_axis(Axis(0), i);
                let xs = xi.as_slice().expect("standard layout");
                let mut out = Array3::<f64>::zeros((self.out_ch, g.oh, g.ow));
                if self.out_ch <= DIRECT_MAX_OUT {
                    g.direct(xs, &wm, &bias, &mut out);
                    return out;
                }
                let band = g.band_rows();
                let mut r0 = 0;
                while r0 < g.oh {
                    let r1 = (r0 + band).min(g.oh);
                    let cols = g.im2col(xs, r0, r1);
                    let y = wm.dot(&cols);
                    for (o, row) in y.outer_iter().enumerate() {
                        let b = bias[o];
                        let mut dst = out.slice_mut(s![o, r0..r1, ..]);
                        let dst = dst.as_slice_mut().expect("contiguous rows");
                        for (d, v) in dst.iter_mut().zip(row.iter()) {
                            *d = v + b;
                        }
                    }
                    r0 = r1;
                }
                out
            })
            .collect();
        stack4(per_sample, (n, self.out_ch, g.oh, g.ow))
    }

    /// Accumulates weight and bias gradients; returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        gy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        self.backward_inner(store, x, gy, Some(grads))
    }

    /// Input gradient only, for frozen layers.
    pub fn backward_input(&self, store: &ParamStore, x: &Tensor, gy: &Tensor) -> Tensor {
        self.backward_inner(store, x, gy, None)
    }

    fn backward_inner(
        &self,
        store: &ParamStore,
        x: &Tensor,
        gy: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let g = self.geometry(x);
        assert_eq!(
            gy.dim(),
            (x.dim().0, self.out_ch, g.oh, g.ow),
            "conv upstream gradient shape"
        );
        let want_params = grads.is_some();
        let x = x.as_standard_layout();
        let gy = gy.as_standard_layout();
        let wm = self.weight_matrix(store);
        let n = x.len_of(Axis(0));
        let ckk = g.ckk();
        let per_sample: Vec<(Array3<f64>, Option<ParamGrads>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.index_axis(Axis(0), i);
                let xs = xi.as_slice().expect("standard layout");
                let gyi: ArrayView3<f64> = gy.index_axis(Axis(0), i);
                let mut gx = Array3::<f64>::zeros((g.c, g.h, g.w));
                let mut params = want_params.then(|| {
                    (
                        Array2::<f64>::zeros((self.out_ch, ckk)),
                        gyi.sum_axis(Axis(2)).sum_axis(Axis(1)),
                    )
                });
                let band = g.band_rows();
                let mut r0 = 0;
                while r0 < g.oh {
                    let r1 = (r0 + band).min(g.oh);
                    let gyc = gyi
                        .slice(s![.., r0..r1, ..])
                        .to_owned()
                        .into_shape_with_order((self.out_ch, (r1 - r0) * g.ow))
                        .expect("band layout");
                    if let Some((dw, _)) = params.as_mut() {
                        let cols = g.im2col(xs, r0, r1);
                        general_mat_mul(1.0, &gyc, &cols.t(), 1.0, dw);
                    }
                    let dcols = wm.t().dot(&gyc);
                    g.col2im(&dcols, gx.as_slice_mut().expect("fresh array"), r0, r1);
                    r0 = r1;
                }
                (gx, params)
            })
            .collect();

        if let Some(grads) = grads {
            {
                let dw_total = grads.get_mut(self.weight);
                let mut dw_total = dw_total
                    .view_mut()
                    .into_shape_with_order((self.out_ch, ckk))
                    .expect("conv weight layout");
                for (_, p) in &per_sample {
                    dw_total += &p.as_ref().expect("param grads requested").0;
                }
            }
            let db_total = grads.get_mut(self.bias);
            for (_, p) in &per_sample {
                *db_total += &p
                    .as_ref()
                    .expect("param grads requested")
                    .1
                    .view()
                    .into_dyn();
            }
        }
        let gx_all = per_sample.into_iter().map(|(gx, _)| gx).collect();
        stack4(gx_all, (n, g.c, g.h, g.w))
    }
}

fn stack4(parts: Vec<Array3<f64>>, shape: (usize, usize, usize, usize)) -> Tensor {
    let mut data = Vec::with_capacity(shape.0 * shape.1 * shape.2 * shape.3);
    for p in parts {
        match p.as_slice() {
            Some(sl) => data.extend_from_slice(sl),
            None => data.extend(p.iter().copied()),
        }
    }
    Tensor::from_shape_vec(shape, data).expect("stacked shape")
}
