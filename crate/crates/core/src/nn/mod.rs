//! A small CPU network engine: parameter storage, layers with hand-written
//! backward passes, and Adam.
//!
//! Activations are `(n, c, h, w)` arrays of `f64`. Every layer exposes a
//! pure `forward` plus a `backward` that takes the cached input and the
//! upstream gradient, accumulates parameter gradients into [`Grads`], and
//! returns the gradient with respect to its input.

mod adam;
mod conv;
mod layers;
mod shuffle;

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::Conv2d;
pub use layers::{
    leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, relu, relu_backward,
    BatchNorm2d, BnCache, Linear, PRelu,
};
pub use shuffle::{pixel_shuffle_aniso, pixel_unshuffle_aniso};

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Tensor = Array4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

/// Named, ordered parameter arrays of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Shape-only description of a stored array, used by checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform `(-bound, bound)` initialization.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound));
        self.add(name, value, true)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        v: f64,
        trainable: bool,
    ) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), v), trainable)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn meta(&self) -> Vec<ParamMeta> {
        self.params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect()
    }

    /// Copies of every non-trainable entry, e.g. batch-norm running statistics.
    pub fn buffers(&self) -> Vec<ArrayD<f64>> {
        self.params
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.value.clone())
            .collect()
    }

    /// Restores values captured by [`ParamStore::buffers`].
    pub fn restore_buffers(&mut self, buffers: Vec<ArrayD<f64>>) {
        let targets = self.params.iter_mut().filter(|p| !p.trainable);
        for (p, v) in targets.zip(buffers) {
            p.value = v;
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    /// Replaces every value, checking names and shapes against the current layout.
    pub fn load_values(&mut self, values: Vec<(String, ArrayD<f64>)>) -> Result<(), String> {
        if values.len() != self.params.len() {
            return Err(format!(
                "expected {} arrays, found {}",
                self.params.len(),
                values.len()
            ));
        }
        for (p, (name, v)) in self.params.iter().zip(&values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(format!(
                    "array `{name}` {:?} does not match `{}` {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                ));
            }
        }
        for (p, (_, v)) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<ArrayD<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    /// Element-wise `self += other`.
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// PyTorch-style default bound `1 / sqrt(fan_in)`.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
