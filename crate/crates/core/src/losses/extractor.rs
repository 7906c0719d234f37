use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{max_pool2, max_pool2_backward, relu, relu_backward, Conv2d, ParamStore, Tensor};

/// ImageNet statistics used to normalise extractor inputs.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Layer names of the VGG19 `features` stack, indexed like torchvision.
pub const VGG19_LAYERS: [&str; 37] = [
    "conv1_1", "relu1_1", "conv1_2", "relu1_2", "pool1", //
    "conv2_1", "relu2_1", "conv2_2", "relu2_2", "pool2", //
    "conv3_1", "relu3_1", "conv3_2", "relu3_2", "conv3_3", "relu3_3", "conv3_4", "relu3_4",
    "pool3", //
    "conv4_1", "relu4_1", "conv4_2", "relu4_2", "conv4_3", "relu4_3", "conv4_4", "relu4_4",
    "pool4", //
    "conv5_1", "relu5_1", "conv5_2", "relu5_2", "conv5_3", "relu5_3", "conv5_4", "relu5_4",
    "pool5",
];

/// Default tap: last convolution before the fifth pooling, pre-activation.
pub const DEFAULT_TAP: &str = "conv5_4";

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
}

/// How to obtain the frozen feature network used by the content loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSpec {
    /// Pretrained VGG19 weights in safetensors format with torchvision key
    /// names (`features.{i}.weight`, `features.{i}.bias`).
    Vgg19 {
        weights: PathBuf,
        #[serde(default = "default_tap")]
        tap: String,
    },
    /// Randomly initialised 3x3 conv/ReLU stack, for runs without pretrained
    /// weights. The tap is the last convolution, pre-activation; a 2x2 max
    /// pool follows each entry of `pool_after`.
    Seeded {
        channels: Vec<usize>,
        #[serde(default)]
        pool_after: Vec<usize>,
        seed: u64,
    },
}

fn default_tap() -> String {
    DEFAULT_TAP.to_string()
}

impl ExtractorSpec {
    pub fn load(&self) -> Result<FeatureExtractor> {
        match self {
            ExtractorSpec::Vgg19 { weights, tap } => FeatureExtractor::vgg19(weights, tap),
            ExtractorSpec::Seeded {
                channels,
                pool_after,
                seed,
            } => FeatureExtractor::seeded(channels, pool_after, *seed),
        }
    }
}

/// Assembles an extractor layer by layer, mainly for tests and custom nets.
#[derive(Debug)]
pub struct ExtractorBuilder {
    store: ParamStore,
    layers: Vec<Layer>,
    in_channels: usize,
    channels: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    hasher: Sha256,
}

impl ExtractorBuilder {
    /// `mean` and `std` have one entry per network input channel; the
    /// grayscale image is replicated across them before normalisation.
    pub fn new(mean: &[f64], std: &[f64]) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::Config(
                "extractor needs matching, non-empty mean and std".into(),
            ));
        }
        if std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(
                "extractor std must be positive and finite".into(),
            ));
        }
        let mut hasher = Sha256::new();
        for v in mean.iter().chain(std) {
            hasher.update(v.to_le_bytes());
        }
        Ok(ExtractorBuilder {
            store: ParamStore::new(),
            layers: Vec::new(),
            in_channels: mean.len(),
            channels: mean.len(),
            mean: mean.to_vec(),
            std: std.to_vec(),
            hasher,
        })
    }

    pub fn conv(mut self, weight: Array4<f64>, bias: Array1<f64>) -> Result<Self> {
        let name = format!("layers.{}", self.layers.len());
        if weight.dim().1 != self.channels {
            return Err(Error::Config(format!(
                "{name}: expects {} input channels, previous layer gives {}",
                weight.dim().1,
                self.channels
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("{name}: non-finite weights")));
        }
        for v in weight.iter().chain(bias.iter()) {
            self.hasher.update(v.to_le_bytes());
        }
        self.channels = weight.dim().0;
        let conv = Conv2d::from_arrays(&mut self.store, &name, weight, bias, 1, false)
            .map_err(Error::Config)?;
        self.layers.push(Layer::Conv(conv));
        Ok(self)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn max_pool(mut self) -> Self {
        self.layers.push(Layer::MaxPool);
        self
    }

    pub fn build(self) -> Result<FeatureExtractor> {
        if self.layers.is_empty() {
            return Err(Error::Config("extractor has no layers".into()));
        }
        let hash = hex::encode(self.hasher.finalize());
        Ok(FeatureExtractor {
            store: self.store,
            layers: self.layers,
            in_channels: self.in_channels,
            mean: self.mean,
            std: self.std,
            weights_hash: hash,
        })
    }
}

/// Frozen convolutional feature network. Inputs are single-channel batches
/// in `[0, 1]`; they are replicated to the network's input channels and
/// normalised before the first layer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    store: ParamStore,
    layers: Vec<Layer>,
    in_channels: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    weights_hash: String,
}

/// Layer inputs recorded by [`FeatureExtractor::features_with_tape`].
#[derive(Debug, Clone)]
pub struct ExtractorTape {
    inputs: Vec<Tensor>,
    gray_dim: (usize, usize, usize, usize),
}

impl FeatureExtractor {
    /// Loads VGG19 from a safetensors file and truncates it after `tap`.
    /// The weight hash is the SHA-256 of the file contents.
    pub fn vgg19(path: &Path, tap: &str) -> Result<Self> {
        let tap_index = VGG19_LAYERS
            .iter()
            .position(|&l| l == tap)
            .ok_or_else(|| Error::Config(format!("unknown VGG19 layer `{tap}`")))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| {
            Error::Config(format!("{}: not a safetensors file: {e}", path.display()))
        })?;
        let mut b = ExtractorBuilder::new(&IMAGENET_MEAN, &IMAGENET_STD)?;
        for (i, name) in VGG19_LAYERS.iter().enumerate().take(tap_index + 1) {
            b = if name.starts_with("conv") {
                let w = read_tensor(&tensors, &format!("features.{i}.weight"))?;
                let bias = read_tensor(&tensors, &format!("features.{i}.bias"))?;
                let (ws, bs) = (w.1, bias.1);
                if ws.len() != 4 || bs.len() != 1 {
                    return Err(Error::Config(format!(
                        "features.{i}: unexpected shapes {ws:?} / {bs:?}"
                    )));
                }
                let w = Array4::from_shape_vec((ws[0], ws[1], ws[2], ws[3]), w.0)
                    .map_err(|e| Error::Config(format!("features.{i}.weight: {e}")))?;
                b.conv(w, Array1::from(bias.0))?
            } else if name.starts_with("relu") {
                b.relu()
            } else {
                b.max_pool()
            };
        }
        let mut ext = b.build()?;
        ext.weights_hash = hex::encode(Sha256::digest(&bytes));
        Ok(ext)
    }

    /// Random-weight conv/ReLU stack, deterministic in `seed`.
    pub fn seeded(channels: &[usize], pool_after: &[usize], seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Config(
                "seeded extractor needs non-zero channel counts".into(),
            ));
        }
        if let Some(&p) = pool_after.iter().find(|&&p| p + 1 >= channels.len()) {
            return Err(Error::Config(format!(
                "pool after conv {p} would follow the tap"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ExtractorBuilder::new(&IMAGENET_MEAN, &IMAGENET_STD)?;
        let mut prev = 3;
        for (i, &c) in channels.iter().enumerate() {
            let bound = (6.0 / (prev * 9) as f64).sqrt();
            let w = Array4::from_shape_fn((c, prev, 3, 3), |_| rng.gen_range(-bound..bound));
            let bias = Array1::zeros(c);
            b = b.conv(w, bias)?;
            if i + 1 < channels.len() {
                b = b.relu();
                if pool_after.contains(&i) {
                    b = b.max_pool();
                }
            }
            prev = c;
        }
        b.build()
    }

    /// Hex SHA-256 identifying the weights.
    pub fn weights_hash(&self) -> &str {
        &self.weights_hash
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Smallest spatial size whose features are at least 1x1.
    pub fn min_input_size(&self) -> usize {
        1 << self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool))
            .count()
    }

    fn prepare(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        if c != 1 {
            return Err(Error::Shape(format!(
                "extractor expects 1-channel input, got {c}"
            )));
        }
        let min = self.min_input_size();
        if h < min || w < min {
            return Err(Error::Shape(format!(
                "extractor input {h}x{w} is smaller than {min}x{min}"
            )));
        }
        let gray = x.index_axis(Axis(1), 0);
        let mut out = Tensor::zeros((n, self.in_channels, h, w));
        for ch in 0..self.in_channels {
            let (m, s) = (self.mean[ch], self.std[ch]);
            out.slice_mut(s![.., ch, .., ..])
                .assign(&gray.mapv(|v| (v - m) / s));
        }
        Ok(out)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.prepare(x)?;
        for layer in &self.layers {
            h = self.apply(layer, &h);
        }
        Ok(h)
    }

    pub fn features_with_tape(&self, x: &Tensor) -> Result<(Tensor, ExtractorTape)> {
        let mut h = self.prepare(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = self.apply(layer, &h);
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok((
            h,
            ExtractorTape {
                inputs,
                gray_dim: x.dim(),
            },
        ))
    }

    /// Gradient of a feature-space objective with respect to the grayscale input.
    pub fn backward(&self, tape: &ExtractorTape, g_features: &Tensor) -> Tensor {
        let mut g = g_features.clone();
        for (layer, x) in self.layers.iter().zip(&tape.inputs).rev() {
            g = match layer {
                Layer::Conv(conv) => conv.backward_input(&self.store, x, &g),
                Layer::Relu => relu_backward(x, &g),
                Layer::MaxPool => max_pool2_backward(x, &g),
            };
        }
        let mut out = Tensor::zeros(tape.gray_dim);
        for ch in 0..self.in_channels {
            let gc = g.slice(s![.., ch..ch + 1, .., ..]);
            out.scaled_add(1.0 / self.std[ch], &gc);
        }
        out
    }

    fn apply(&self, layer: &Layer, x: &Tensor) -> Tensor {
        match layer {
            Layer::Conv(conv) => conv.forward(&self.store, x),
            Layer::Relu => relu(x),
            Layer::MaxPool => max_pool2(x),
        }
    }
}

fn read_tensor(tensors: &SafeTensors<'_>, key: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let t = tensors
        .tensor(key)
        .map_err(|_| Error::Config(format!("weights file has no tensor `{key}`")))?;
    let data = t.data();
    let values: Vec<f64> = match t.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "`{key}` has unsupported dtype {other:?}"
            )))
        }
    };
    Ok((values, t.shape().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg19_layer_table() {
        assert_eq!(
            VGG19_LAYERS
                .iter()
                .filter(|l| l.starts_with("conv"))
                .count(),
            16
        );
        assert_eq!(
            VGG19_LAYERS
                .iter()
                .filter(|l| l.starts_with("pool"))
                .count(),
            5
        );
        assert_eq!(VGG19_LAYERS[34], "conv5_4");
    }

    #[test]
    fn seeded_is_deterministic() {
        let a = FeatureExtractor::seeded(&[4, 4], &[0], 3).unwrap();
        let b = FeatureExtractor::seeded(&[4, 4], &[0], 3).unwrap();
        let c = FeatureExtractor::seeded(&[4, 4], &[0], 4).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        assert_ne!(a.weights_hash(), c.weights_hash());
        assert_eq!(a.min_input_size(), 2);
        let x = Tensor::from_shape_fn((1, 1, 6, 6), |(_, _, y, x)| (y * 6 + x) as f64 / 36.0);
        assert_eq!(a.features(&x).unwrap(), b.features(&x).unwrap());
        assert_eq!(a.features(&x).unwrap().dim(), (1, 4, 3, 3));
    }

    #[test]
    fn rejects_small_and_multichannel_inputs() {
        let f = FeatureExtractor::seeded(&[2, 2, 2], &[0, 1], 0).unwrap();
        assert_eq!(f.min_input_size(), 4);
        assert!(matches!(
            f.features(&Tensor::zeros((1, 1, 3, 8))),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            f.features(&Tensor::zeros((1, 2, 8, 8))),
            Err(Error::Shape(_))
        ));
        assert!(FeatureExtractor::seeded(&[2], &[0], 0).is_err());
    }
}
