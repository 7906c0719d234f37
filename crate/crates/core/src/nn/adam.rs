use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers of one optimizer, laid out like its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn zeros_for(store: &ParamStore) -> Self {
        let z: Vec<ArrayD<f64>> = store
            .params()
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        AdamState {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// Bias-corrected Adam. Non-trainable entries of the store are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            state: AdamState::zeros_for(store),
        }
    }

    /// Clears moments and the step count.
    pub fn reset(&mut self, store: &ParamStore) {
        self.state = AdamState::zeros_for(store);
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in store
            .params_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            if !p.trainable {
                continue;
            }
            Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
