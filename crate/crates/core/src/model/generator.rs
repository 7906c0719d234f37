use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{GeneratorConfig, UpscaleStage};
use super::{images_to_batch, SuperResolver};
use crate::error::{Error, Result};
use crate::image::SliceImage;
use crate::nn::{
    pixel_shuffle_aniso, pixel_unshuffle_aniso, BatchNorm2d, BnCache, Conv2d, Grads, PRelu,
    ParamStore, Tensor,
};

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: Option<BatchNorm2d>,
    act: PRelu,
    conv2: Conv2d,
    bn2: Option<BatchNorm2d>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    input: Tensor,
    normed1: Tensor,
    act1: Tensor,
    bn1: Option<BnCache>,
    bn2: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct UpsampleBlock {
    stage: UpscaleStage,
    conv: Conv2d,
    act: PRelu,
}

#[derive(Debug, Clone)]
struct UpsampleTape {
    input: Tensor,
    shuffled: Tensor,
}

/// Intermediate activations of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct GenTape {
    input: Tensor,
    head_pre: Tensor,
    head_out: Tensor,
    blocks: Vec<BlockTape>,
    trunk_in: Tensor,
    trunk_bn: Option<BnCache>,
    ups: Vec<UpsampleTape>,
    tail_in: Tensor,
    output: Tensor,
}

impl GenTape {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    head: Conv2d,
    head_act: PRelu,
    blocks: Vec<ResidualBlock>,
    trunk_conv: Conv2d,
    trunk_bn: Option<BatchNorm2d>,
    ups: Vec<UpsampleBlock>,
    tail: Conv2d,
}

fn apply_bn(bn: &Option<BatchNorm2d>, store: &ParamStore, x: Tensor) -> Tensor {
    match bn {
        Some(bn) => bn.forward(store, &x),
        None => x,
    }
}

fn apply_bn_train(
    bn: &Option<BatchNorm2d>,
    store: &mut ParamStore,
    x: Tensor,
) -> (Tensor, Option<BnCache>) {
    match bn {
        Some(bn) => {
            let (y, c) = bn.forward_train(store, &x);
            (y, Some(c))
        }
        None => (x, None),
    }
}

fn bn_backward(
    bn: &Option<BatchNorm2d>,
    store: &ParamStore,
    cache: &Option<BnCache>,
    g: Tensor,
    grads: &mut Grads,
) -> Tensor {
    match (bn, cache) {
        (Some(bn), Some(c)) => bn.backward(store, c, &g, grads),
        _ => g,
    }
}

/// `(tanh(z) + 1) / 2`.
fn bounded(z: f64) -> f64 {
    0.5 * (z.tanh() + 1.0)
}

impl Generator {
    /// Deterministic initialization from `seed`.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let bn = |store: &mut ParamStore, name: &str| {
            config.batch_norm.then(|| BatchNorm2d::new(store, name, c))
        };

        let head = Conv2d::new(&mut store, &mut rng, "head.conv", 1, c, 9, 1);
        let head_act = PRelu::new(&mut store, "head.act", c);
        let mut blocks = Vec::with_capacity(config.num_residual_blocks);
        for i in 0..config.num_residual_blocks {
            let p = format!("blocks.{i}");
            let conv1 = Conv2d::new(&mut store, &mut rng, &format!("{p}.conv1"), c, c, 3, 1);
            let bn1 = bn(&mut store, &format!("{p}.bn1"));
            let act = PRelu::new(&mut store, &format!("{p}.act"), c);
            let conv2 = Conv2d::new(&mut store, &mut rng, &format!("{p}.conv2"), c, c, 3, 1);
            let bn2 = bn(&mut store, &format!("{p}.bn2"));
            blocks.push(ResidualBlock {
                conv1,
                bn1,
                act,
                conv2,
                bn2,
            });
        }
        let trunk_conv = Conv2d::new(&mut store, &mut rng, "trunk.conv", c, c, 3, 1);
        let trunk_bn = bn(&mut store, "trunk.bn");
        let ups = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, &stage)| UpsampleBlock {
                stage,
                conv: Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("upsample.{i}.conv"),
                    c,
                    c * stage.rh * stage.rw,
                    3,
                    1,
                ),
                act: PRelu::new(&mut store, &format!("upsample.{i}.act"), c),
            })
            .collect();
        let tail = Conv2d::new(&mut store, &mut rng, "tail.conv", c, 1, 9, 1);
        Ok(Generator {
            config,
            store,
            head,
            head_act,
            blocks,
            trunk_conv,
            trunk_bn,
            ups,
            tail,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (fh, fw) = self.config.factors();
        (h * fh, w * fw)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != 1 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "generator expects (n>=1, 1, h>=1, w>=1), got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    /// Inference pass; batch norm layers use running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let s = &self.store;
        let head_out = self.head_act.forward(s, &self.head.forward(s, x));
        let mut h = head_out.clone();
        for b in &self.blocks {
            let t = apply_bn(&b.bn1, s, b.conv1.forward(s, &h));
            let t = b.act.forward(s, &t);
            let t = apply_bn(&b.bn2, s, b.conv2.forward(s, &t));
            h = t + &h;
        }
        let mut u = apply_bn(&self.trunk_bn, s, self.trunk_conv.forward(s, &h)) + &head_out;
        for up in &self.ups {
            let shuffled = pixel_shuffle_aniso(&up.conv.forward(s, &u), up.stage.rh, up.stage.rw)?;
            u = up.act.forward(s, &shuffled);
        }
        Ok(self.tail.forward(s, &u).mapv(bounded))
    }

    /// Training pass with batch statistics; updates running statistics.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, GenTape)> {
        self.check_input(x)?;
        let head_pre = self.head.forward(&self.store, x);
        let head_out = self.head_act.forward(&self.store, &head_pre);
        let mut h = head_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let c1 = b.conv1.forward(&self.store, &h);
            let (normed1, bn1) = apply_bn_train(&b.bn1, &mut self.store, c1);
            let act1 = b.act.forward(&self.store, &normed1);
            let c2 = b.conv2.forward(&self.store, &act1);
            let (normed2, bn2) = apply_bn_train(&b.bn2, &mut self.store, c2);
            let out = normed2 + &h;
            blocks.push(BlockTape {
                input: h,
                normed1,
                act1,
                bn1,
                bn2,
            });
            h = out;
        }
        let trunk_in = h;
        let trunk_conv = self.trunk_conv.forward(&self.store, &trunk_in);
        let (trunk_normed, trunk_bn) = apply_bn_train(&self.trunk_bn, &mut self.store, trunk_conv);
        let mut u = trunk_normed + &head_out;
        let mut ups = Vec::with_capacity(self.ups.len());
        for up in &self.ups {
            let shuffled =
                pixel_shuffle_aniso(&up.conv.forward(&self.store, &u), up.stage.rh, up.stage.rw)?;
            let next = up.act.forward(&self.store, &shuffled);
            ups.push(UpsampleTape { input: u, shuffled });
            u = next;
        }
        let output = self.tail.forward(&self.store, &u).mapv(bounded);
        let tape = GenTape {
            input: x.clone(),
            head_pre,
            head_out,
            blocks,
            trunk_in,
            trunk_bn,
            ups,
            tail_in: u,
            output: output.clone(),
        };
        Ok((output, tape))
    }

    /// Parameter gradients and input gradient for upstream gradient `gy`.
    pub fn backward(&self, tape: &GenTape, gy: &Tensor) -> Result<(Grads, Tensor)> {
        if gy.dim() != tape.output.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                gy.dim(),
                tape.output.dim()
            )));
        }
        let s = &self.store;
        let mut grads = s.zero_grads();
        // d/dz (tanh z + 1)/2 = 2 y (1 - y)
        let mut g = gy * &tape.output.mapv(|y| 2.0 * y * (1.0 - y));
        g = self.tail.backward(s, &tape.tail_in, &g, &mut grads);
        for (up, t) in self.ups.iter().zip(&tape.ups).rev() {
            g = up.act.backward(s, &t.shuffled, &g, &mut grads);
            g = pixel_unshuffle_aniso(&g, up.stage.rh, up.stage.rw)?;
            g = up.conv.backward(s, &t.input, &g, &mut grads);
        }
        let skip = g.clone();
        g = bn_backward(&self.trunk_bn, s, &tape.trunk_bn, g, &mut grads);
        g = self.trunk_conv.backward(s, &tape.trunk_in, &g, &mut grads);
        for (b, t) in self.blocks.iter().zip(&tape.blocks).rev() {
            let block_skip = g.clone();
            let mut gb = bn_backward(&b.bn2, s, &t.bn2, g, &mut grads);
            gb = b.conv2.backward(s, &t.act1, &gb, &mut grads);
            gb = b.act.backward(s, &t.normed1, &gb, &mut grads);
            gb = bn_backward(&b.bn1, s, &t.bn1, gb, &mut grads);
            gb = b.conv1.backward(s, &t.input, &gb, &mut grads);
            g = gb + &block_skip;
        }
        g += &skip;
        g = self.head_act.backward(s, &tape.head_pre, &g, &mut grads);
        let gx = self.head.backward(s, &tape.input, &g, &mut grads);
        debug_assert_eq!(tape.head_out.dim().0, gx.dim().0);
        Ok((grads, gx))
    }

    /// Super-resolves a batch of same-sized slices.
    pub fn super_resolve_batch(&self, lr: &[&SliceImage]) -> Result<Vec<SliceImage>> {
        if lr.is_empty() {
            return Ok(Vec::new());
        }
        let shape = lr[0].dim();
        if lr.iter().any(|i| i.dim() != shape) {
            return Err(Error::Shape("batch images must share a shape".into()));
        }
        let out = self.forward(&images_to_batch(lr))?;
        lr.iter()
            .zip(out.outer_iter())
            .map(|(src, o)| {
                SliceImage::from_clamped(
                    o.index_axis(ndarray::Axis(0), 0).to_owned(),
                    src.provenance().clone(),
                )
            })
            .collect()
    }
}

impl SuperResolver for Generator {
    fn factors(&self) -> (usize, usize) {
        self.config.factors()
    }

    fn super_resolve(&self, lr: &SliceImage) -> Result<SliceImage> {
        Ok(self.super_resolve_batch(&[lr])?.remove(0))
    }
}
