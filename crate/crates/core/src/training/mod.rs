//! Generator pretraining on pixel MSE followed by alternating
//! discriminator/generator updates on the perceptual objective.

mod checkpoint;
mod log;

pub use checkpoint::{
    load_checkpoint, load_generator, save_checkpoint, CheckpointDir, CHECKPOINT_VERSION,
};
pub use log::{read_log, EpochRecord, ExperimentLog, LogHeader};

use std::time::Instant;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degradation::{downsample, DegradationSpec};
use crate::error::{Error, Result};
use crate::image::SliceImage;
use crate::losses::{
    discriminator_loss, discriminator_loss_grad, perceptual_loss_grad, pixel_mse_grad,
    FeatureExtractor, LossWeights,
};
use crate::metrics::{psnr_arrays, ssim_arrays, MetricParams};
use crate::model::{images_to_batch, Discriminator, Generator};
use crate::nn::{Adam, AdamConfig, Grads, Tensor};

/// How discriminator and generator updates alternate during adversarial
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternationSchedule {
    /// One discriminator step then one generator step on every batch.
    #[default]
    PerBatch,
    /// A full epoch of discriminator steps, then a full epoch of generator
    /// steps over the same batch order.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pretraining rate when it should differ from `learning_rate`.
    pub pretrain_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub pretrain_epochs: usize,
    pub adversarial_epochs: usize,
    pub seed: u64,
    pub degradation: DegradationSpec,
    pub loss_weights: LossWeights,
    pub schedule: AlternationSchedule,
    /// Permits adversarial training before pretraining has finished.
    pub cold_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            pretrain_learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            pretrain_epochs: 20,
            adversarial_epochs: 50,
            seed: 0,
            degradation: DegradationSpec::isotropic(4),
            loss_weights: LossWeights::default(),
            schedule: AlternationSchedule::PerBatch,
            cold_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for lr in std::iter::once(self.learning_rate).chain(self.pretrain_learning_rate) {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!(
                    "learning rates must be > 0, got {lr}"
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        self.degradation.validate()?;
        self.loss_weights.validate()
    }

    pub fn pretrain_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.pretrain_learning_rate.unwrap_or(self.learning_rate),
            ..self.adam()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adversarial,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
        })
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_optimizer: Adam,
    pub d_optimizer: Adam,
    pub phase: Phase,
    pub pretrain_epochs_done: usize,
    pub adversarial_epochs_done: usize,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        generator: Generator,
        discriminator: Discriminator,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let g_optimizer = Adam::new(cfg.adam(), generator.store());
        let d_optimizer = Adam::new(cfg.adam(), discriminator.store());
        Ok(TrainState {
            generator,
            discriminator,
            g_optimizer,
            d_optimizer,
            phase: Phase::Pretrain,
            pretrain_epochs_done: 0,
            adversarial_epochs_done: 0,
            generator_steps: 0,
            discriminator_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

/// LR/HR training pairs of one shape.
#[derive(Debug, Clone)]
pub struct TrainingData {
    lr: Vec<SliceImage>,
    hr: Vec<SliceImage>,
}

impl TrainingData {
    /// Degrades every HR image with `spec`. All images must share a shape.
    pub fn from_hr(hr: Vec<SliceImage>, spec: &DegradationSpec) -> Result<Self> {
        if let Some(first) = hr.first() {
            if let Some(bad) = hr.iter().find(|i| i.dim() != first.dim()) {
                return Err(Error::Shape(format!(
                    "training images must share a shape: {:?} vs {:?}",
                    first.dim(),
                    bad.dim()
                )));
            }
        }
        let lr = hr
            .par_iter()
            .map(|h| downsample(h, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { lr, hr })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn hr(&self) -> &[SliceImage] {
        &self.hr
    }

    pub fn lr(&self) -> &[SliceImage] {
        &self.lr
    }

    /// `(lr, hr)` batches for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let lr: Vec<&SliceImage> = indices.iter().map(|&i| &self.lr[i]).collect();
        let hr: Vec<&SliceImage> = indices.iter().map(|&i| &self.hr[i]).collect();
        (images_to_batch(&lr), images_to_batch(&hr))
    }
}

/// The fixed subset of training images scored after every epoch.
pub fn validation_indices(seed: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76a1_1d47_0b5e_55ed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(batch_size.min(n));
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateEvent {
    Discriminator { step: u64 },
    Generator { phase: Phase, step: u64 },
}

/// Instrumentation callbacks, invoked after each optimizer update and at the
/// end of each epoch.
pub trait TrainObserver {
    fn on_update(&mut self, _event: UpdateEvent) {}
    fn on_epoch_end(&mut self, _record: &EpochRecord) {}
}

/// Observer that keeps everything it sees.
#[derive(Debug, Clone, Default)]
pub struct RecordingObserver {
    pub updates: Vec<UpdateEvent>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainObserver for RecordingObserver {
    fn on_update(&mut self, event: UpdateEvent) {
        self.updates.push(event);
    }

    fn on_epoch_end(&mut self, record: &EpochRecord) {
        self.epochs.push(record.clone());
    }
}

/// Optional side channels of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub observer: Option<&'a mut dyn TrainObserver>,
    pub log: Option<&'a mut ExperimentLog>,
    pub checkpoints: Option<&'a CheckpointDir>,
}

impl TrainHooks<'_> {
    fn update(&mut self, event: UpdateEvent) {
        if let Some(o) = self.observer.as_deref_mut() {
            o.on_update(event);
        }
    }

    fn epoch_end(&mut self, state: &TrainState, record: &EpochRecord) -> Result<()> {
        if let Some(log) = self.log.as_deref_mut() {
            log.append(record)?;
        }
        if let Some(dir) = self.checkpoints {
            dir.save_epoch(state)?;
        }
        if let Some(o) = self.observer.as_deref_mut() {
            o.on_epoch_end(record);
        }
        Ok(())
    }
}

fn check_data(state: &TrainState, data: &TrainingData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Train("training set is empty".into()));
    }
    let (lh, lw) = data.lr[0].dim();
    let hr = data.hr[0].dim();
    if state.generator.output_hw(lh, lw) != hr {
        return Err(Error::Config(format!(
            "generator maps {lh}x{lw} to {:?} but HR images are {hr:?}",
            state.generator.output_hw(lh, lw)
        )));
    }
    Ok(())
}

fn epoch_order(state: &mut TrainState, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut state.rng);
    order
}

fn ensure_finite(value: f64, what: &str, epoch: usize, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            step,
            what: what.to_string(),
        })
    }
}

fn ensure_grads(grads: &Grads, what: &str, epoch: usize, step: u64) -> Result<()> {
    if grads.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            step,
            what: what.to_string(),
        })
    }
}

/// Mean PSNR and SSIM of the generator on the validation subset.
fn validate_online(
    g: &Generator,
    data: &TrainingData,
    indices: &[usize],
) -> Result<(Option<f64>, Option<f64>)> {
    let (lr, hr) = data.batch(indices);
    let sr = g.forward(&lr)?;
    let p = MetricParams::default();
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for i in 0..indices.len() {
        let a = sr.slice(s![i, 0, .., ..]);
        let b = hr.slice(s![i, 0, .., ..]);
        if let Some(v) = psnr_arrays(&a, &b, &p)?.db() {
            psnrs.push(v);
        }
        if let Ok(v) = ssim_arrays(a, b, &p) {
            ssims.push(v);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok((mean(&psnrs), mean(&ssims)))
}

/// Runs the remaining pretraining epochs, minimising pixel MSE. The
/// discriminator is not touched. A state already in the adversarial phase is
/// left as is.
pub fn pretrain_generator(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<()> {
    cfg.validate()?;
    check_data(state, data)?;
    if state.phase != Phase::Pretrain {
        return Ok(());
    }
    state.g_optimizer.config = cfg.pretrain_adam();
    let val = validation_indices(cfg.seed, data.len(), cfg.batch_size);
    let start = Instant::now();
    while state.pretrain_epochs_done < cfg.pretrain_epochs {
        let epoch = state.pretrain_epochs_done + 1;
        let order = epoch_order(state, data.len());
        let mut total = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for idx in batches {
            let (lr, hr) = data.batch(idx);
            let step = state.generator_steps + 1;
            let saved = state.generator.store().buffers();
            let attempt = (|| -> Result<(f64, Grads)> {
                let (sr, tape) = state.generator.forward_train(&lr)?;
                let (loss, gy) = pixel_mse_grad(&sr, &hr)?;
                ensure_finite(loss, "pixel mse", epoch, step)?;
                let (grads, _) = state.generator.backward(&tape, &gy)?;
                ensure_grads(&grads, "generator gradient", epoch, step)?;
                Ok((loss, grads))
            })();
            let (loss, grads) = match attempt {
                Ok(v) => v,
                Err(e) => {
                    state.generator.store_mut().restore_buffers(saved);
                    return Err(e);
                }
            };
            state.g_optimizer.step(state.generator.store_mut(), &grads);
            state.generator_steps = step;
            total += loss;
            hooks.update(UpdateEvent::Generator {
                phase: Phase::Pretrain,
                step,
            });
        }
        let (val_psnr, val_ssim) = validate_online(&state.generator, data, &val)?;
        state.pretrain_epochs_done = epoch;
        let record = EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            g_loss: total / n_batches as f64,
            d_loss: None,
            val_psnr,
            val_ssim,
            wall_time: start.elapsed().as_secs_f64(),
        };
        hooks.epoch_end(state, &record)?;
    }
    Ok(())
}

/// Losses of one discriminator update, before it is applied.
fn discriminator_step(
    state: &mut TrainState,
    sr: &Tensor,
    hr: &Tensor,
    epoch: usize,
) -> Result<f64> {
    let step = state.discriminator_steps + 1;
    let saved = state.discriminator.store().buffers();
    let attempt = (|| -> Result<(f64, Grads)> {
        let (p_hr, tape_hr) = state.discriminator.forward_train(hr)?;
        let (p_sr, tape_sr) = state.discriminator.forward_train(sr)?;
        let loss = discriminator_loss(&p_hr, &p_sr)?;
        ensure_finite(loss, "discriminator loss", epoch, step)?;
        let (g_hr, g_sr) = discriminator_loss_grad(&p_hr, &p_sr)?;
        let (mut grads, _) = state.discriminator.backward(&tape_hr, &g_hr)?;
        let (grads_sr, _) = state.discriminator.backward(&tape_sr, &g_sr)?;
        grads.add(&grads_sr);
        ensure_grads(&grads, "discriminator gradient", epoch, step)?;
        Ok((loss, grads))
    })();
    match attempt {
        Ok((loss, grads)) => {
            state
                .d_optimizer
                .step(state.discriminator.store_mut(), &grads);
            state.discriminator_steps = step;
            Ok(loss)
        }
        Err(e) => {
            state.discriminator.store_mut().restore_buffers(saved);
            Err(e)
        }
    }
}

/// Perceptual-loss generator update. The discriminator's running statistics
/// are left as they were.
fn generator_step(
    state: &mut TrainState,
    lr: &Tensor,
    hr: &Tensor,
    extractor: &FeatureExtractor,
    w: &LossWeights,
    epoch: usize,
) -> Result<f64> {
    let step = state.generator_steps + 1;
    let g_saved = state.generator.store().buffers();
    let d_saved = state.discriminator.store().buffers();
    let attempt = (|| -> Result<(f64, Grads)> {
        let (sr, tape) = state.generator.forward_train(lr)?;
        let (loss, gy) = perceptual_loss_grad(&sr, hr, &mut state.discriminator, extractor, w)?;
        ensure_finite(loss, "perceptual loss", epoch, step)?;
        let (grads, _) = state.generator.backward(&tape, &gy)?;
        ensure_grads(&grads, "generator gradient", epoch, step)?;
        Ok((loss, grads))
    })();
    state.discriminator.store_mut().restore_buffers(d_saved);
    match attempt {
        Ok((loss, grads)) => {
            state.g_optimizer.step(state.generator.store_mut(), &grads);
            state.generator_steps = step;
            Ok(loss)
        }
        Err(e) => {
            state.generator.store_mut().restore_buffers(g_saved);
            Err(e)
        }
    }
}

/// Runs the remaining adversarial epochs. Both optimizers start from fresh
/// moments when the phase begins. After every epoch the generator is scored
/// on the fixed validation subset.
pub fn adversarial_train(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    hooks: &mut TrainHooks<'_>,
) -> Result<()> {
    cfg.validate()?;
    check_data(state, data)?;
    let (hh, hw) = data.hr[0].dim();
    let dc = state.discriminator.config();
    if (dc.input_height, dc.input_width) != (hh, hw) {
        return Err(Error::Config(format!(
            "discriminator expects {}x{} inputs but HR images are {hh}x{hw}",
            dc.input_height, dc.input_width
        )));
    }
    if state.phase == Phase::Pretrain
        && state.pretrain_epochs_done < cfg.pretrain_epochs
        && !cfg.cold_start
    {
        return Err(Error::Train(format!(
            "generator has only {} of {} pretraining epochs; set cold_start to skip them",
            state.pretrain_epochs_done, cfg.pretrain_epochs
        )));
    }
    let val = validation_indices(cfg.seed, data.len(), cfg.batch_size);
    let start = Instant::now();
    while state.adversarial_epochs_done < cfg.adversarial_epochs {
        if state.phase == Phase::Pretrain {
            state.g_optimizer = Adam::new(cfg.adam(), state.generator.store());
            state.d_optimizer = Adam::new(cfg.adam(), state.discriminator.store());
            state.phase = Phase::Adversarial;
        }
        state.g_optimizer.config = cfg.adam();
        state.d_optimizer.config = cfg.adam();
        let epoch = state.adversarial_epochs_done + 1;
        let order = epoch_order(state, data.len());
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let (mut g_total, mut d_total) = (0.0, 0.0);
        match cfg.schedule {
            AlternationSchedule::PerBatch => {
                for idx in &batches {
                    let (lr, hr) = data.batch(idx);
                    let sr = state.generator.forward(&lr)?;
                    d_total += discriminator_step(state, &sr, &hr, epoch)?;
                    hooks.update(UpdateEvent::Discriminator {
                        step: state.discriminator_steps,
                    });
                    g_total +=
                        generator_step(state, &lr, &hr, extractor, &cfg.loss_weights, epoch)?;
                    hooks.update(UpdateEvent::Generator {
                        phase: Phase::Adversarial,
                        step: state.generator_steps,
                    });
                }
            }
            AlternationSchedule::PerEpoch => {
                for idx in &batches {
                    let (lr, hr) = data.batch(idx);
                    let sr = state.generator.forward(&lr)?;
                    d_total += discriminator_step(state, &sr, &hr, epoch)?;
                    hooks.update(UpdateEvent::Discriminator {
                        step: state.discriminator_steps,
                    });
                }
                for idx in &batches {
                    let (lr, hr) = data.batch(idx);
                    g_total +=
                        generator_step(state, &lr, &hr, extractor, &cfg.loss_weights, epoch)?;
                    hooks.update(UpdateEvent::Generator {
                        phase: Phase::Adversarial,
                        step: state.generator_steps,
                    });
                }
            }
        }
        let (val_psnr, val_ssim) = validate_online(&state.generator, data, &val)?;
        state.adversarial_epochs_done = epoch;
        let n = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            phase: Phase::Adversarial,
            g_loss: g_total / n,
            d_loss: Some(d_total / n),
            val_psnr,
            val_ssim,
            wall_time: start.elapsed().as_secs_f64(),
        };
        hooks.epoch_end(state, &record)?;
    }
    Ok(())
}

/// Pretraining followed by adversarial training.
pub fn train(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    hooks: &mut TrainHooks<'_>,
) -> Result<()> {
    pretrain_generator(state, data, cfg, hooks)?;
    adversarial_train(state, data, cfg, extractor, hooks)
}

/// Mean discriminator probability over a set of same-sized images.
pub fn mean_discriminator_output(d: &Discriminator, images: &[SliceImage]) -> Result<f64> {
    let refs: Vec<&SliceImage> = images.iter().collect();
    let batch = images_to_batch(&refs);
    if batch.len_of(Axis(0)) == 0 {
        return Err(Error::Shape("no images".into()));
    }
    d.mean_probability(&batch)
}
