//! Gravity loss: focal classification over every gravity point plus
//! smooth-L1 offset regression over the hooked ones, `GL = cls + lambda * reg`.
//!
//! Both terms are normalized by `max(1, positives)`. Probabilities are
//! clamped to `[EPS, 1 - EPS]` before the logarithm.

use serde::{Deserialize, Serialize};

use crate::anchors::HookingAssignment;
use crate::error::{Error, Result};

pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub phi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            alpha: 0.25,
            phi: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidConfig(format!("phi must be >= 0, got {}", self.phi)));
        }
        Ok(())
    }

    fn alpha_t(&self, positive: bool) -> f64 {
        if positive {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

pub fn smooth_l1(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

pub fn smooth_l1_derivative(t: f64) -> f64 {
    if t.abs() < 1.0 {
        t
    } else {
        t.signum()
    }
}

/// `-alpha_t (1 - p_t)^phi ln p_t` for one anchor and its derivative with
/// respect to `p_t`. The derivative is zero where the clamp is active.
fn focal_term(p_t: f64, alpha_t: f64, phi: f64) -> (f64, f64) {
    let p = p_t.clamp(EPS, 1.0 - EPS);
    let q = 1.0 - p;
    let ln_p = p.ln();
    let modulating = q.powf(phi);
    let value = -alpha_t * modulating * ln_p;
    let grad = if p_t != p {
        0.0
    } else {
        // d/dp [-(1-p)^phi ln p] = phi (1-p)^(phi-1) ln p - (1-p)^phi / p
        let d_mod = if phi == 0.0 { 0.0 } else { phi * q.powf(phi - 1.0) };
        alpha_t * (d_mod * ln_p - modulating / p)
    };
    (value, grad)
}

fn normalizer(positives: usize) -> f64 {
    positives.max(1) as f64
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("{what}: length {a} does not match {b}")));
    }
    Ok(())
}

pub fn classification_loss(scores: &[f64], positive: &[bool], config: &LossConfig) -> Result<f64> {
    Ok(classification_loss_with_grad(scores, positive, config)?.0)
}

/// Classification loss and its gradient with respect to each score.
pub fn classification_loss_with_grad(
    scores: &[f64],
    positive: &[bool],
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_len("scores vs labels", scores.len(), positive.len())?;
    let norm = normalizer(positive.iter().filter(|&&p| p).count());
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &pos) in scores.iter().zip(positive) {
        let (p_t, dp_ds) = if pos { (s, 1.0) } else { (1.0 - s, -1.0) };
        let (v, g) = focal_term(p_t, config.alpha_t(pos), config.phi);
        total += v;
        grad.push(g * dp_ds / norm);
    }
    Ok((total / norm, grad))
}

pub fn regression_loss(offsets: &[[f64; 2]], targets: &[[f64; 2]], positive: &[bool]) -> Result<f64> {
    Ok(regression_loss_with_grad(offsets, targets, positive)?.0)
}

/// Regression loss and its gradient with respect to each predicted offset.
pub fn regression_loss_with_grad(
    offsets: &[[f64; 2]],
    targets: &[[f64; 2]],
    positive: &[bool],
) -> Result<(f64, Vec<[f64; 2]>)> {
    check_len("offsets vs targets", offsets.len(), targets.len())?;
    check_len("offsets vs labels", offsets.len(), positive.len())?;
    let norm = normalizer(positive.iter().filter(|&&p| p).count());
    let mut total = 0.0;
    let mut grad = vec![[0.0; 2]; offsets.len()];
    for (i, ((o, d), &pos)) in offsets.iter().zip(targets).zip(positive).enumerate() {
        if !pos {
            continue;
        }
        for axis in 0..2 {
            let t = d[axis] - o[axis];
            total += smooth_l1(t);
            grad[i][axis] = -smooth_l1_derivative(t) / norm;
        }
    }
    Ok((total / norm, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GravityLoss {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

impl GravityLoss {
    pub fn combine(cls: f64, reg: f64, lambda: f64) -> Self {
        Self {
            total: cls + lambda * reg,
            cls,
            reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.reg.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GravityLossGrad {
    pub scores: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

pub fn gravity_loss(
    scores: &[f64],
    offsets: &[[f64; 2]],
    assignment: &HookingAssignment,
    config: &LossConfig,
) -> Result<GravityLoss> {
    Ok(gravity_loss_with_grad(scores, offsets, assignment, config)?.0)
}

/// Gravity loss together with its gradient with respect to scores and offsets.
pub fn gravity_loss_with_grad(
    scores: &[f64],
    offsets: &[[f64; 2]],
    assignment: &HookingAssignment,
    config: &LossConfig,
) -> Result<(GravityLoss, GravityLossGrad)> {
    let (cls, score_grad) = classification_loss_with_grad(scores, &assignment.positive, config)?;
    let (reg, mut offset_grad) =
        regression_loss_with_grad(offsets, &assignment.target_offset, &assignment.positive)?;
    for g in &mut offset_grad {
        g[0] *= config.lambda;
        g[1] *= config.lambda;
    }
    Ok((
        GravityLoss::combine(cls, reg, config.lambda),
        GravityLossGrad {
            scores: score_grad,
            offsets: offset_grad,
        },
    ))
}

/// Focal loss evaluated from logits, `score = sigmoid(logit)`, with its
/// gradient with respect to each logit.
///
/// Used for training: `ln p` is taken as a log-sigmoid so saturated logits
/// keep a gradient, and no clamping is applied. Away from saturation it
/// agrees with [`classification_loss_with_grad`] composed with the sigmoid.
pub fn classification_loss_logits(
    logits: &[f64],
    positive: &[bool],
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_len("logits vs labels", logits.len(), positive.len())?;
    let norm = normalizer(positive.iter().filter(|&&p| p).count());
    let phi = config.phi;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &pos) in logits.iter().zip(positive) {
        // z_t is the logit of the true class: p_t = sigmoid(z_t).
        let z_t = if pos { z } else { -z };
        let log_p = log_sigmoid(z_t);
        let p = log_p.exp();
        let q = sigmoid(-z_t);
        let alpha_t = config.alpha_t(pos);
        let modulating = q.powf(phi);
        total += -alpha_t * modulating * log_p;
        // d/dz_t [-(q^phi) ln p] with dp/dz_t = p q, dq/dz_t = -p q:
        //   phi q^(phi-1) p q ln p - q^phi q  = q^phi (phi p ln p - q)
        let d_zt = alpha_t * modulating * (phi * p * log_p - q);
        let d_z = if pos { d_zt } else { -d_zt };
        grad.push(d_z / norm);
    }
    Ok((total / norm, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}
