//! SGD and Adam steppers, the Adam update direction, and learning-rate schedules.
//!
//! [`AdamState`] holds the raw exponential moving averages. Each step folds the
//! gradient in and bias-corrects by the post-step counter:
//!
//! ```text
//! m' = (b1 m + (1 - b1) g) / (1 - b1^t')     v' = (b2 v + (1 - b2) g^2) / (1 - b2^t')
//! gamma = m' / sqrt(v' + eps)                 theta' = theta - lr * gamma
//! ```
//!
//! [`gamma`] performs that fold on a snapshot without mutating it.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Where epsilon enters the Adam denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPlacement {
    /// `m / sqrt(v + eps)`
    #[default]
    InsideSqrt,
    /// `m / (sqrt(v) + eps)`, the usual library form.
    OutsideSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub epsilon_placement: EpsilonPlacement,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epsilon_placement: EpsilonPlacement::InsideSqrt,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| b > 0.0 && b < 1.0;
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("adam epsilon must be > 0".into()));
        }
        Ok(())
    }

    fn direction(&self, m_hat: f64, v_hat: f64) -> f64 {
        match self.epsilon_placement {
            EpsilonPlacement::InsideSqrt => m_hat / libm::sqrt(v_hat + self.epsilon),
            EpsilonPlacement::OutsideSqrt => m_hat / (libm::sqrt(v_hat) + self.epsilon),
        }
    }
}

/// Raw first/second moments and the number of steps taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Result of folding one gradient into a moment snapshot.
#[derive(Debug, Clone)]
pub struct Fold {
    pub m_raw: Vec<f64>,
    pub v_raw: Vec<f64>,
    /// Bias-corrected first moment.
    pub m_hat: Vec<f64>,
    /// Bias-corrected second moment.
    pub v_hat: Vec<f64>,
    pub t: u64,
}

pub fn fold(config: &AdamConfig, grad: &[f64], state: &AdamState) -> Result<Fold> {
    if grad.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::dims("adam moments", state.m.len(), grad.len()));
    }
    let t = state.t + 1;
    let c1 = 1.0 - libm::pow(config.beta1, t as f64);
    let c2 = 1.0 - libm::pow(config.beta2, t as f64);
    let n = grad.len();
    let mut f = Fold {
        m_raw: Vec::with_capacity(n),
        v_raw: Vec::with_capacity(n),
        m_hat: Vec::with_capacity(n),
        v_hat: Vec::with_capacity(n),
        t,
    };
    for ((&g, &m), &v) in grad.iter().zip(&state.m).zip(&state.v) {
        let m1 = config.beta1 * m + (1.0 - config.beta1) * g;
        let v1 = config.beta2 * v + (1.0 - config.beta2) * g * g;
        f.m_raw.push(m1);
        f.v_raw.push(v1);
        f.m_hat.push(m1 / c1);
        f.v_hat.push(v1 / c2);
    }
    Ok(f)
}

/// The update direction Adam would take for `grad` from `state`, per unit
/// learning rate. The snapshot is left untouched.
pub fn gamma(config: &AdamConfig, grad: &[f64], state: &AdamState) -> Result<Vec<f64>> {
    let f = fold(config, grad, state)?;
    Ok(f.m_hat
        .iter()
        .zip(&f.v_hat)
        .map(|(&m, &v)| config.direction(m, v))
        .collect())
}

/// One Adam step in place. A non-finite gradient is rejected before anything changes.
pub fn adam_step(
    config: &AdamConfig,
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::dims("adam params", params.len(), grad.len()));
    }
    if !math::all_finite(grad) {
        return Err(Error::NumericFault("adam gradient"));
    }
    let f = fold(config, grad, state)?;
    for ((p, &m), &v) in params.iter_mut().zip(&f.m_hat).zip(&f.v_hat) {
        *p -= lr * config.direction(m, v);
    }
    state.m = f.m_raw;
    state.v = f.v_raw;
    state.t = f.t;
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::dims("sgd params", params.len(), grad.len()));
    }
    if !math::all_finite(grad) {
        return Err(Error::NumericFault("sgd gradient"));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(grad: &[f64]) -> Vec<f64> {
    grad.iter()
        .map(|&g| {
            if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// Linear warmup, then linear decay to zero.
    WarmupLinear,
    /// Linear warmup, then cosine decay to zero.
    WarmupCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    #[serde(default)]
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(peak: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::Constant,
            peak,
            warmup_fraction: 0.0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0) || !self.peak.is_finite() {
            return Err(Error::InvalidConfig(
                "peak lr must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(
                "warmup_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        libm::floor(self.warmup_fraction * self.total_steps as f64) as usize
    }

    /// Learning rate used at step `t` (0-based).
    pub fn lr(&self, t: usize) -> f64 {
        if self.kind == ScheduleKind::Constant {
            return self.peak;
        }
        let warm = self.warmup_steps();
        if t < warm {
            return self.peak * (t + 1) as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1) as f64;
        let progress = ((t - warm) as f64 / span).min(1.0);
        let lr = match self.kind {
            ScheduleKind::WarmupLinear => self.peak * (1.0 - progress),
            ScheduleKind::WarmupCosine => {
                0.5 * self.peak * (1.0 + libm::cos(core::f64::consts::PI * progress))
            }
            ScheduleKind::Constant => unreachable!(),
        };
        lr.max(0.0)
    }

    pub fn num_epochs(&self, steps_per_epoch: usize) -> usize {
        self.total_steps.div_ceil(steps_per_epoch.max(1))
    }

    /// Mean learning rate over the steps of `epoch`. A trailing partial epoch
    /// averages over the steps it actually has.
    pub fn epoch_avg_lr(&self, epoch: usize, steps_per_epoch: usize) -> Result<f64> {
        if steps_per_epoch == 0 {
            return Err(Error::Empty("steps_per_epoch"));
        }
        let n = self.num_epochs(steps_per_epoch);
        if epoch >= n {
            return Err(Error::OutOfRange {
                what: "epoch",
                value: epoch,
                limit: n,
            });
        }
        let start = epoch * steps_per_epoch;
        let end = (start + steps_per_epoch).min(self.total_steps);
        if self.kind == ScheduleKind::Constant {
            return Ok(self.peak);
        }
        let sum: f64 = (start..end).map(|t| self.lr(t)).sum();
        Ok(sum / (end - start) as f64)
    }
}
