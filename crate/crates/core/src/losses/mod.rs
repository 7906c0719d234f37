//! Training objectives: pretrained-feature content loss, adversarial terms
//! and plain pixel MSE.

mod extractor;

pub use extractor::{
    ExtractorBuilder, ExtractorSpec, ExtractorTape, FeatureExtractor, DEFAULT_TAP, IMAGENET_MEAN,
    IMAGENET_STD, VGG19_LAYERS,
};

use ndarray::{ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Discriminator;
use crate::nn::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_content: f64,
    pub w_adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_content: 1.0,
            w_adversarial: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_content) || !ok(self.w_adversarial) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        if self.w_content == 0.0 && self.w_adversarial == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

fn check_probs(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Domain(format!("{what}: no probabilities")));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Domain(format!(
            "{what}: probability {bad} outside (0, 1]"
        )));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// `mean(-ln d_sr)`: small when the discriminator takes SR for HR.
pub fn adversarial_loss_g(d_sr: &[f64]) -> Result<f64> {
    check_probs(d_sr, "adversarial loss")?;
    Ok(d_sr.iter().map(|&p| -clamp_prob(p).0.ln()).sum::<f64>() / d_sr.len() as f64)
}

/// Gradient of [`adversarial_loss_g`] with respect to each probability.
pub fn adversarial_loss_g_grad(d_sr: &[f64]) -> Result<Vec<f64>> {
    check_probs(d_sr, "adversarial loss")?;
    let n = d_sr.len() as f64;
    Ok(d_sr
        .iter()
        .map(|&p| match clamp_prob(p) {
            (_, true) => 0.0,
            (q, false) => -1.0 / (q * n),
        })
        .collect())
}

/// Binary cross-entropy with HR labelled 1 and SR labelled 0, averaged over
/// the two halves.
pub fn discriminator_loss(d_hr: &[f64], d_sr: &[f64]) -> Result<f64> {
    check_probs(d_hr, "discriminator loss (hr)")?;
    check_probs(d_sr, "discriminator loss (sr)")?;
    let real = d_hr.iter().map(|&p| -clamp_prob(p).0.ln()).sum::<f64>() / d_hr.len() as f64;
    let fake = d_sr
        .iter()
        .map(|&p| -(1.0 - clamp_prob(p).0).ln())
        .sum::<f64>()
        / d_sr.len() as f64;
    Ok(0.5 * (real + fake))
}

/// `(d loss / d d_hr, d loss / d d_sr)`.
pub fn discriminator_loss_grad(d_hr: &[f64], d_sr: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_probs(d_hr, "discriminator loss (hr)")?;
    check_probs(d_sr, "discriminator loss (sr)")?;
    let (nh, ns) = (d_hr.len() as f64, d_sr.len() as f64);
    let gh = d_hr
        .iter()
        .map(|&p| match clamp_prob(p) {
            (_, true) => 0.0,
            (q, false) => -0.5 / (nh * q),
        })
        .collect();
    let gs = d_sr
        .iter()
        .map(|&p| match clamp_prob(p) {
            (_, true) => 0.0,
            (q, false) => 0.5 / (ns * (1.0 - q)),
        })
        .collect();
    Ok((gh, gs))
}

/// Mean squared difference over every element.
pub fn pixel_mse<S1, S2, D>(sr: &ArrayBase<S1, D>, hr: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if sr.shape() != hr.shape() {
        return Err(Error::Shape(format!(
            "mse operands differ: {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    if sr.is_empty() {
        return Err(Error::Shape("mse of empty arrays".into()));
    }
    let sum = Zip::from(sr)
        .and(hr)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / sr.len() as f64)
}

/// `(mse, d mse / d sr)`.
pub fn pixel_mse_grad(sr: &Tensor, hr: &Tensor) -> Result<(f64, Tensor)> {
    let loss = pixel_mse(sr, hr)?;
    let k = 2.0 / sr.len() as f64;
    Ok((loss, (sr - hr) * k))
}

/// Mean squared difference between tap-layer features of `sr` and `hr`.
pub fn content_loss(sr: &Tensor, hr: &Tensor, f: &FeatureExtractor) -> Result<f64> {
    if sr.dim() != hr.dim() {
        return Err(Error::Shape(format!(
            "content operands differ: {:?} vs {:?}",
            sr.dim(),
            hr.dim()
        )));
    }
    pixel_mse(&f.features(sr)?, &f.features(hr)?)
}

/// `(content loss, d loss / d sr)`. `hr` receives no gradient.
pub fn content_loss_grad(sr: &Tensor, hr: &Tensor, f: &FeatureExtractor) -> Result<(f64, Tensor)> {
    if sr.dim() != hr.dim() {
        return Err(Error::Shape(format!(
            "content operands differ: {:?} vs {:?}",
            sr.dim(),
            hr.dim()
        )));
    }
    let target = f.features(hr)?;
    let (feat, tape) = f.features_with_tape(sr)?;
    let loss = pixel_mse(&feat, &target)?;
    let g = (&feat - &target) * (2.0 / feat.len() as f64);
    Ok((loss, f.backward(&tape, &g)))
}

/// `w_content * content + w_adversarial * adversarial`. The content term is
/// skipped entirely when its weight is zero.
pub fn perceptual_loss(
    sr: &Tensor,
    hr: &Tensor,
    d_sr: &[f64],
    f: &FeatureExtractor,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    let content = if w.w_content > 0.0 {
        content_loss(sr, hr, f)?
    } else {
        0.0
    };
    let adversarial = if w.w_adversarial > 0.0 {
        adversarial_loss_g(d_sr)?
    } else {
        0.0
    };
    Ok(w.w_content * content + w.w_adversarial * adversarial)
}

/// Perceptual loss of `sr` and its gradient with respect to `sr`. The
/// adversarial term runs the discriminator in training mode; its running
/// statistics are updated as a side effect and left to the caller.
pub fn perceptual_loss_grad(
    sr: &Tensor,
    hr: &Tensor,
    d: &mut Discriminator,
    f: &FeatureExtractor,
    w: &LossWeights,
) -> Result<(f64, Tensor)> {
    w.validate()?;
    let mut grad = Tensor::zeros(sr.raw_dim());
    let mut loss = 0.0;
    if w.w_content > 0.0 {
        let (content, g) = content_loss_grad(sr, hr, f)?;
        loss += w.w_content * content;
        grad.scaled_add(w.w_content, &g);
    }
    if w.w_adversarial > 0.0 {
        let (p_sr, tape) = d.forward_train(sr)?;
        loss += w.w_adversarial * adversarial_loss_g(&p_sr)?;
        let (_, g) = d.backward(&tape, &adversarial_loss_g_grad(&p_sr)?)?;
        grad.scaled_add(w.w_adversarial, &g);
    }
    Ok((loss, grad))
}
