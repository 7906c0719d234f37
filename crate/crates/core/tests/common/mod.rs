//! Helpers shared by the integration tests: stub resolvers, tiny models,
//! finite-difference gradient checks and a direct SSIM implementation.

#![allow(dead_code)]

use mrsr::losses::{ExtractorBuilder, FeatureExtractor};
use mrsr::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SuperResolver};
use mrsr::nn::{Grads, ParamStore, Tensor};
use mrsr::{Provenance, Result, SliceImage};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> SliceImage {
    let px = Array2::from_shape_fn((h, w), |_| rng.gen::<f64>());
    SliceImage::new(px, Provenance::synthetic(0)).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_shape_fn(shape, |_| rng.gen::<f64>())
}

/// Returns its input unchanged.
pub struct IdentityStub;

impl SuperResolver for IdentityStub {
    fn factors(&self) -> (usize, usize) {
        (1, 1)
    }

    fn super_resolve(&self, lr: &SliceImage) -> Result<SliceImage> {
        Ok(lr.clone())
    }
}

/// Nearest-neighbour enlargement: every input pixel becomes an `fh x fw`
/// block.
pub struct NearestStub {
    pub fh: usize,
    pub fw: usize,
}

impl SuperResolver for NearestStub {
    fn factors(&self) -> (usize, usize) {
        (self.fh, self.fw)
    }

    fn super_resolve(&self, lr: &SliceImage) -> Result<SliceImage> {
        let (h, w) = lr.dim();
        let px = Array2::from_shape_fn((h * self.fh, w * self.fw), |(y, x)| {
            lr.pixels()[[y / self.fh, x / self.fw]]
        });
        SliceImage::new(px, lr.provenance().clone())
    }
}

/// Generator with 4 base channels and one residual block.
pub fn tiny_generator(cfg: GeneratorConfig, seed: u64) -> Generator {
    Generator::build(cfg.with_size(4, 1), seed).unwrap()
}

pub fn tiny_discriminator(h: usize, w: usize, seed: u64) -> Discriminator {
    Discriminator::build(
        DiscriminatorConfig {
            in_channels: 1,
            input_height: h,
            input_width: w,
            base_channels: 2,
            dense_units: 4,
            batch_norm: true,
        },
        seed,
    )
    .unwrap()
}

/// Three-channel extractor: conv 3->3, ReLU, 2x2 max pool, conv 3->2.
pub fn stub_extractor(seed: u64) -> FeatureExtractor {
    let mut r = rng(seed);
    let mut w = |o, i| Array4::from_shape_fn((o, i, 3, 3), |_| r.gen_range(-0.4..0.4));
    let w1 = w(3, 3);
    let w2 = w(2, 3);
    ExtractorBuilder::new(&[0.4, 0.5, 0.6], &[0.2, 0.25, 0.3])
        .unwrap()
        .conv(w1, Array1::from(vec![0.05, -0.02, 0.01]))
        .unwrap()
        .relu()
        .max_pool()
        .conv(w2, Array1::from(vec![0.0, 0.1]))
        .unwrap()
        .build()
        .unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-5)`. The floor keeps entries whose true
/// gradient is zero from turning rounding noise into a large ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub const FD_STEP: f64 = 1e-6;
const FD_MIN_STEP: f64 = 1e-7;
const SMOOTH_TOL: f64 = 1e-4;

/// Central difference of `f` at `x0`. ReLU-family activations and max
/// pooling make losses piecewise smooth; when the quotients at `h` and
/// `h / 4` disagree, the window straddles a kink and the step is shrunk.
/// Returns the estimate and whether refinement was needed.
pub fn central_difference(x0: f64, mut f: impl FnMut(f64) -> f64) -> (f64, bool) {
    let mut quotient = |h: f64| (f(x0 + h) - f(x0 - h)) / (2.0 * h);
    let mut h = FD_STEP;
    let mut coarse = quotient(h);
    let mut refined = false;
    loop {
        let fine = quotient(h / 4.0);
        if rel_err(coarse, fine) < SMOOTH_TOL || h / 10.0 < FD_MIN_STEP {
            return (coarse, refined);
        }
        refined = true;
        h /= 10.0;
        coarse = quotient(h);
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Entries whose finite difference needed a smaller step near a kink.
    pub refined: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, (numeric, refined): (f64, bool)) {
        self.worst = self.worst.max(rel_err(analytic, numeric));
        self.checked += 1;
        self.refined += usize::from(refined);
    }
}

/// Compares `analytic` with central differences of `loss` over every
/// trainable scalar of the store reached through `store`.
pub fn check_param_grads<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    analytic: &Grads,
    mut loss: impl FnMut(&mut M) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    for k in 0..store(model).len() {
        if !store(model).params()[k].trainable {
            continue;
        }
        let len = store(model).params()[k].value.len();
        for i in 0..len {
            let orig = flat(store(model), k, i);
            let numeric = central_difference(orig, |v| {
                set_flat(store(model), k, i, v);
                loss(model)
            });
            set_flat(store(model), k, i, orig);
            out.record(
                analytic.values()[k].as_slice_memory_order().unwrap()[i],
                numeric,
            );
        }
    }
    out
}

fn flat(store: &ParamStore, k: usize, i: usize) -> f64 {
    store.params()[k].value.as_slice_memory_order().unwrap()[i]
}

fn set_flat(store: &mut ParamStore, k: usize, i: usize, v: f64) {
    store.params_mut()[k]
        .value
        .as_slice_memory_order_mut()
        .unwrap()[i] = v;
}

/// Compares `analytic` with central differences of `loss` with respect to
/// every entry of `x`.
pub fn check_input_grad(
    x: &Tensor,
    analytic: &Tensor,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut probe = x.clone();
    for (idx, &a) in analytic.indexed_iter() {
        let orig = probe[idx];
        let numeric = central_difference(orig, |v| {
            probe[idx] = v;
            loss(&probe)
        });
        probe[idx] = orig;
        out.record(a, numeric);
    }
    out
}

/// SSIM written straight from its definition: for every fully contained
/// window, weighted means, variances and covariance are summed over the 2D
/// Gaussian weights `g[i] * g[j]` with no separable filtering.
pub fn ssim_direct(a: &Array2<f64>, b: &Array2<f64>, size: usize, sigma: f64, range: f64) -> f64 {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (h, w) = a.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - size) {
        for x0 in 0..=(w - size) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wt = g[i] * g[j];
                    ma += wt * a[[y0 + i, x0 + j]];
                    mb += wt * b[[y0 + i, x0 + j]];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wt = g[i] * g[j];
                    let da = a[[y0 + i, x0 + j]] - ma;
                    let db = b[[y0 + i, x0 + j]] - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Brute-force sub-pixel rearrangement by enumerating input indices.
pub fn shuffle_oracle(x: &Tensor, rh: usize, rw: usize) -> Tensor {
    let (n, cin, h, w) = x.dim();
    let c = cin / (rh * rw);
    let mut out = Tensor::from_elem((n, c, h * rh, w * rw), f64::NAN);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..rh {
                for j in 0..rw {
                    for y in 0..h {
                        for xx in 0..w {
                            out[[b, ch, y * rh + i, xx * rw + j]] =
                                x[[b, ch * rh * rw + i * rw + j, y, xx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient checks on the tiny-model profile.
pub mod gradcheck {
    use super::*;
    use mrsr::losses::{
        discriminator_loss, discriminator_loss_grad, perceptual_loss, perceptual_loss_grad,
        pixel_mse, pixel_mse_grad, LossWeights,
    };

    fn g_store(g: &mut Generator) -> &mut ParamStore {
        g.store_mut()
    }

    fn d_store(d: &mut Discriminator) -> &mut ParamStore {
        d.store_mut()
    }

    /// Pixel MSE through a tiny generator, every trainable parameter.
    pub fn generator_mse(cfg: GeneratorConfig) -> GradCheck {
        let mut r = rng(11);
        let mut g = tiny_generator(cfg, 3);
        let x = random_tensor(&mut r, (2, 1, 8, 8));
        let (oh, ow) = g.output_hw(8, 8);
        let target = random_tensor(&mut r, (2, 1, oh, ow));
        let (y, tape) = g.forward_train(&x).unwrap();
        let (_, gy) = pixel_mse_grad(&y, &target).unwrap();
        let (grads, _) = g.backward(&tape, &gy).unwrap();
        check_param_grads(&mut g, g_store, &grads, |g| {
            pixel_mse(&g.forward_train(&x).unwrap().0, &target).unwrap()
        })
    }

    /// Gradient of the perceptual loss with respect to the SR batch.
    pub fn perceptual_wrt_sr(w: LossWeights) -> GradCheck {
        let mut r = rng(12);
        let f = stub_extractor(5);
        let mut d = tiny_discriminator(16, 16, 6);
        let sr = random_tensor(&mut r, (2, 1, 16, 16));
        let hr = random_tensor(&mut r, (2, 1, 16, 16));
        let (_, analytic) = perceptual_loss_grad(&sr, &hr, &mut d, &f, &w).unwrap();
        check_input_grad(&sr, &analytic, |s| {
            let (p, _) = d.forward_train(s).unwrap();
            perceptual_loss(s, &hr, &p, &f, &w).unwrap()
        })
    }

    /// Perceptual loss backpropagated through discriminator, extractor and a
    /// tiny x2 generator to every generator parameter.
    pub fn generator_perceptual(w: LossWeights) -> GradCheck {
        let mut r = rng(13);
        let f = stub_extractor(7);
        let mut d = tiny_discriminator(16, 16, 8);
        let mut g = tiny_generator(GeneratorConfig::isotropic(2).unwrap(), 9);
        let lr = random_tensor(&mut r, (2, 1, 8, 8));
        let hr = random_tensor(&mut r, (2, 1, 16, 16));
        let (sr, tape) = g.forward_train(&lr).unwrap();
        let (_, gsr) = perceptual_loss_grad(&sr, &hr, &mut d, &f, &w).unwrap();
        let (grads, _) = g.backward(&tape, &gsr).unwrap();
        check_param_grads(&mut g, g_store, &grads, |g| {
            let sr = g.forward_train(&lr).unwrap().0;
            let (p, _) = d.forward_train(&sr).unwrap();
            perceptual_loss(&sr, &hr, &p, &f, &w).unwrap()
        })
    }

    /// Discriminator loss over separate HR and SR passes, every trainable
    /// discriminator parameter.
    pub fn discriminator() -> GradCheck {
        let mut r = rng(14);
        let mut d = tiny_discriminator(16, 16, 10);
        let hr = random_tensor(&mut r, (2, 1, 16, 16));
        let sr = random_tensor(&mut r, (2, 1, 16, 16)).mapv(|v| 0.5 * v);
        let (p_hr, t_hr) = d.forward_train(&hr).unwrap();
        let (p_sr, t_sr) = d.forward_train(&sr).unwrap();
        let (g_hr, g_sr) = discriminator_loss_grad(&p_hr, &p_sr).unwrap();
        let (mut grads, _) = d.backward(&t_hr, &g_hr).unwrap();
        grads.add(&d.backward(&t_sr, &g_sr).unwrap().0);
        check_param_grads(&mut d, d_store, &grads, |d| {
            let p_hr = d.forward_train(&hr).unwrap().0;
            let p_sr = d.forward_train(&sr).unwrap().0;
            discriminator_loss(&p_hr, &p_sr).unwrap()
        })
    }
}

/// Proptest settings for integration tests, which have no source file for
/// proptest to attach regression files to.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}
