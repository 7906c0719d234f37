use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::nn::{
    leaky_relu, leaky_relu_backward, BatchNorm2d, BnCache, Conv2d, Grads, Linear, ParamStore,
    Tensor,
};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
struct ConvLayer {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Debug, Clone)]
struct ConvTape {
    input: Tensor,
    pre_act: Tensor,
    bn: Option<BnCache>,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct DiscTape {
    convs: Vec<ConvTape>,
    feature_shape: (usize, usize, usize, usize),
    flat: Array2<f64>,
    dense_pre: Array2<f64>,
    dense_act: Array2<f64>,
    probs: Vec<f64>,
    clamped: Vec<bool>,
}

impl DiscTape {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<ConvLayer>,
    dense: Linear,
    head: Linear,
}

fn sigmoid_clamped(z: f64) -> (f64, bool) {
    let p = 1.0 / (1.0 + (-z).exp());
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = vec![ConvLayer {
            conv: Conv2d::new(
                &mut store,
                &mut rng,
                "conv.0",
                1,
                config.base_channels,
                3,
                1,
            ),
            bn: None,
        }];
        let mut ch = config.base_channels;
        for (i, (out, stride)) in config.blocks().into_iter().enumerate() {
            let name = format!("conv.{}", i + 1);
            let conv = Conv2d::new(&mut store, &mut rng, &name, ch, out, 3, stride);
            let bn = config
                .batch_norm
                .then(|| BatchNorm2d::new(&mut store, &format!("bn.{}", i + 1), out));
            convs.push(ConvLayer { conv, bn });
            ch = out;
        }
        let (fh, fw) = config.feature_hw();
        let dense = Linear::new(
            &mut store,
            &mut rng,
            "dense",
            ch * fh * fw,
            config.dense_units,
        );
        let head = Linear::new(&mut store, &mut rng, "head", config.dense_units, 1);
        Ok(Discriminator {
            config,
            store,
            convs,
            dense,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let want = (self.config.input_height, self.config.input_width);
        if n == 0 || c != 1 || (h, w) != want {
            return Err(Error::Shape(format!(
                "discriminator expects (n>=1, 1, {}, {}), got {:?}",
                want.0,
                want.1,
                x.dim()
            )));
        }
        Ok(())
    }

    fn flatten(x: &Tensor) -> Array2<f64> {
        let n = x.dim().0;
        let f = x.len() / n;
        x.as_standard_layout()
            .to_owned()
            .into_shape_with_order((n, f))
            .expect("flatten")
    }

    fn probabilities(&self, logits: &Array2<f64>) -> (Vec<f64>, Vec<bool>) {
        logits.column(0).iter().map(|&z| sigmoid_clamped(z)).unzip()
    }

    /// Probability that each image is HR, clamped to `[1e-7, 1 - 1e-7]`.
    /// Batch norm uses running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let s = &self.store;
        let mut h = x.clone();
        for layer in &self.convs {
            let mut t = layer.conv.forward(s, &h);
            if let Some(bn) = &layer.bn {
                t = bn.forward(s, &t);
            }
            h = leaky_relu(&t, SLOPE);
        }
        let d = self
            .dense
            .forward(s, &Self::flatten(&h))
            .mapv(|v| if v > 0.0 { v } else { SLOPE * v });
        Ok(self.probabilities(&self.head.forward(s, &d)).0)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Vec<f64>, DiscTape)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let c = layer.conv.forward(&self.store, &h);
            let (pre_act, bn) = match &layer.bn {
                Some(bn) => {
                    let (y, cache) = bn.forward_train(&mut self.store, &c);
                    (y, Some(cache))
                }
                None => (c, None),
            };
            let next = leaky_relu(&pre_act, SLOPE);
            convs.push(ConvTape {
                input: h,
                pre_act,
                bn,
            });
            h = next;
        }
        let feature_shape = h.dim();
        let flat = Self::flatten(&h);
        let dense_pre = self.dense.forward(&self.store, &flat);
        let dense_act = dense_pre.mapv(|v| if v > 0.0 { v } else { SLOPE * v });
        let logits = self.head.forward(&self.store, &dense_act);
        let (probs, clamped) = self.probabilities(&logits);
        let tape = DiscTape {
            convs,
            feature_shape,
            flat,
            dense_pre,
            dense_act,
            probs: probs.clone(),
            clamped,
        };
        Ok((probs, tape))
    }

    /// Backpropagates `d loss / d probability` for each sample. Clamped
    /// outputs pass no gradient.
    pub fn backward(&self, tape: &DiscTape, grad_probs: &[f64]) -> Result<(Grads, Tensor)> {
        if grad_probs.len() != tape.probs.len() {
            return Err(Error::Shape(format!(
                "expected {} probability gradients, got {}",
                tape.probs.len(),
                grad_probs.len()
            )));
        }
        let s = &self.store;
        let mut grads = s.zero_grads();
        let n = tape.probs.len();
        let g_logits = Array2::from_shape_fn((n, 1), |(i, _)| {
            if tape.clamped[i] {
                0.0
            } else {
                let p = tape.probs[i];
                grad_probs[i] * p * (1.0 - p)
            }
        });
        let g = self
            .head
            .backward(s, &tape.dense_act, &g_logits, &mut grads);
        let mut g = g;
        ndarray::Zip::from(&mut g)
            .and(&tape.dense_pre)
            .for_each(|g, &x| {
                if x <= 0.0 {
                    *g *= SLOPE;
                }
            });
        let g_flat = self.dense.backward(s, &tape.flat, &g, &mut grads);
        let mut g: Tensor = g_flat
            .into_shape_with_order(tape.feature_shape)
            .expect("unflatten");
        for (layer, t) in self.convs.iter().zip(&tape.convs).rev() {
            g = leaky_relu_backward(&t.pre_act, &g, SLOPE);
            if let (Some(bn), Some(cache)) = (&layer.bn, &t.bn) {
                g = bn.backward(s, cache, &g, &mut grads);
            }
            g = layer.conv.backward(s, &t.input, &g, &mut grads);
        }
        Ok((grads, g))
    }

    /// Mean output over a batch, in eval mode.
    pub fn mean_probability(&self, x: &Tensor) -> Result<f64> {
        let p = self.forward(x)?;
        Ok(p.iter().sum::<f64>() / p.len() as f64)
    }
}
