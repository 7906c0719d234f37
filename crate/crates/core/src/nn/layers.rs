use ndarray::{Array1, Array2, Axis, Ix1, Ix2, Zip};
use rand::Rng;

use super::{fan_in_bound, Grads, ParamId, ParamStore, Tensor};

/// Parametric ReLU with one learnable slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    alpha: ParamId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        PRelu {
            alpha: store.add_const(format!("{name}.alpha"), &[channels], 0.25, true),
        }
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    fn slopes(&self, store: &ParamStore) -> Array1<f64> {
        store
            .get(self.alpha)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("alpha is 1-d")
            .to_owned()
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let a = self.slopes(store);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let ac = a[c];
            plane.mapv_inplace(|v| if v > 0.0 { v } else { ac * v });
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        gy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let a = self.slopes(store);
        let mut gx = gy.clone();
        let mut da = Array1::<f64>::zeros(a.len());
        for (c, (mut g, xc)) in gx
            .axis_iter_mut(Axis(1))
            .zip(x.axis_iter(Axis(1)))
            .enumerate()
        {
            let ac = a[c];
            let mut acc = 0.0;
            Zip::from(&mut g).and(&xc).for_each(|g, &xv| {
                if xv <= 0.0 {
                    acc += *g * xv;
                    *g *= ac;
                }
            });
            da[c] = acc;
        }
        *grads.get_mut(self.alpha) += &da.into_dyn();
        gx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut g = gy.clone();
    Zip::from(&mut g).and(x).for_each(|g, &xv| {
        if xv <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, gy: &Tensor, slope: f64) -> Tensor {
    let mut g = gy.clone();
    Zip::from(&mut g).and(x).for_each(|g, &xv| {
        if xv <= 0.0 {
            *g *= slope;
        }
    });
    g
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Tensor::from_shape_fn((n, c, oh, ow), |(i, ch, y, xx)| {
        let (y0, x0) = (2 * y, 2 * xx);
        x[[i, ch, y0, x0]]
            .max(x[[i, ch, y0, x0 + 1]])
            .max(x[[i, ch, y0 + 1, x0]])
            .max(x[[i, ch, y0 + 1, x0 + 1]])
    })
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool2_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = gy.dim();
    let mut gx = Tensor::zeros(x.raw_dim());
    for i in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let (y0, x0) = (2 * y, 2 * xx);
                    let mut best = (y0, x0);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        if x[[i, ch, y0 + dy, x0 + dx]] > x[[i, ch, best.0, best.1]] {
                            best = (y0 + dy, x0 + dx);
                        }
                    }
                    gx[[i, ch, best.0, best.1]] += gy[[i, ch, y, xx]];
                }
            }
        }
    }
    gx
}

/// Batch normalization over `(n, h, w)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    eps: f64,
}

/// Values saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_const(format!("{name}.weight"), &[channels], 1.0, true),
            beta: store.add_const(format!("{name}.bias"), &[channels], 0.0, true),
            running_mean: store.add_const(format!("{name}.running_mean"), &[channels], 0.0, false),
            running_var: store.add_const(format!("{name}.running_var"), &[channels], 1.0, false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn vec(store: &ParamStore, id: ParamId) -> Array1<f64> {
        store
            .get(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d")
            .to_owned()
    }

    fn affine(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mean: &Array1<f64>,
        inv_std: &Array1<f64>,
    ) -> (Tensor, Tensor) {
        let gamma = Self::vec(store, self.gamma);
        let beta = Self::vec(store, self.beta);
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (c, (mut xh, mut yc)) in xhat
            .axis_iter_mut(Axis(1))
            .zip(y.axis_iter_mut(Axis(1)))
            .enumerate()
        {
            let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            xh.mapv_inplace(|v| (v - m) * s);
            Zip::from(&mut yc).and(&xh).for_each(|y, &h| *y = g * h + b);
        }
        (y, xhat)
    }

    /// Normalizes with running statistics.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mean = Self::vec(store, self.running_mean);
        let inv_std = Self::vec(store, self.running_var).mapv(|v| 1.0 / (v + self.eps).sqrt());
        self.affine(store, x, &mean, &inv_std).0
    }

    /// Normalizes with batch statistics and folds them into the running ones.
    pub fn forward_train(&self, store: &mut ParamStore, x: &Tensor) -> (Tensor, BnCache) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for (ci, plane) in x.axis_iter(Axis(1)).enumerate() {
            let m = plane.sum() / count;
            mean[ci] = m;
            var[ci] = plane.fold(0.0, |acc, &v| acc + (v - m) * (v - m)) / count;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let (y, xhat) = self.affine(store, x, &mean, &inv_std);
        let unbiased = if count > 1.0 {
            count / (count - 1.0)
        } else {
            1.0
        };
        let m = self.momentum;
        {
            let rm = store.get_mut(self.running_mean);
            Zip::from(rm.view_mut().into_dimensionality::<Ix1>().expect("1-d"))
                .and(&mean)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
        }
        {
            let rv = store.get_mut(self.running_var);
            Zip::from(rv.view_mut().into_dimensionality::<Ix1>().expect("1-d"))
                .and(&var)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b * unbiased);
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BnCache,
        gy: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let gamma = Self::vec(store, self.gamma);
        let (n, c, h, w) = gy.dim();
        let count = (n * h * w) as f64;
        let mut gx = Tensor::zeros(gy.raw_dim());
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let g = gy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_g = g.sum();
            let sum_gx = Zip::from(&g).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
            dgamma[ci] = sum_gx;
            dbeta[ci] = sum_g;
            let k = gamma[ci] * cache.inv_std[ci] / count;
            let mut out = gx.index_axis_mut(Axis(1), ci);
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &hv| {
                    *o = k * (count * gv - sum_g - hv * sum_gx);
                });
        }
        *grads.get_mut(self.gamma) += &dgamma.into_dyn();
        *grads.get_mut(self.beta) += &dbeta.into_dyn();
        gx
    }
}

/// Fully connected layer on `(n, features)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let bound = fan_in_bound(in_features);
        Linear {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[out_features, in_features],
                bound,
                rng,
            ),
            bias: store.add_uniform(format!("{name}.bias"), &[out_features], bound, rng),
            in_features,
            out_features,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    fn weight<'a>(&self, store: &'a ParamStore) -> ndarray::ArrayView2<'a, f64> {
        store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d weight")
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let b = store
            .get(self.bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d bias");
        x.dot(&self.weight(store).t()) + b
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        gy: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let dw = gy.t().dot(x);
        *grads.get_mut(self.weight) += &dw.into_dyn();
        *grads.get_mut(self.bias) += &gy.sum_axis(Axis(0)).into_dyn();
        gy.dot(&self.weight(store))
    }
}
