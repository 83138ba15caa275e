//! First-order optimizers and the cosine learning-rate schedule.
//!
//! State is held per parameter group (one group per context vector, one
//! for the gain, and one per basis in pretrained mode). A trainer builds a
//! fresh [`OptimizerState`] at the start of every task.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_rho() -> f64 {
    0.99
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn rmsprop(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            lr,
            rho: default_rho(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::rmsprop(lr)
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::rmsprop(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(config_err(format!("optimizer.{name} must lie in [0, 1), got {x}")))
            }
        };
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_err(format!("optimizer.lr must be non-negative, got {}", self.lr)));
        }
        if !(self.eps > 0.0) {
            return Err(config_err(format!("optimizer.eps must be positive, got {}", self.eps)));
        }
        unit("rho", self.rho)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)
    }
}

/// `s ← ρ·s + (1−ρ)·g²`, `p ← p − lr·g/(√s + ε)`.
pub fn rmsprop_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    sq_avg: &mut [T],
    lr: T,
    rho: T,
    eps: T,
) -> Result<()> {
    check_lens(params.len(), &[grads.len(), sq_avg.len()])?;
    let keep = T::one() - rho;
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(sq_avg.iter_mut()) {
        *s = rho * *s + keep * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

/// Bias-corrected Adam step; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) -> Result<()> {
    check_lens(params.len(), &[grads.len(), first.len(), second.len()])?;
    if step == 0 {
        return Err(usage_err("adam step counter starts at 1"));
    }
    let t = T::of(step as f64);
    let c1 = T::one() - beta1.powf(t);
    let c2 = T::one() - beta2.powf(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        *m = beta1 * *m + (T::one() - beta1) * g;
        *v = beta2 * *v + (T::one() - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn sgd_update<T: Scalar>(params: &mut [T], grads: &[T], lr: T) -> Result<()> {
    check_lens(params.len(), &[grads.len()])?;
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

fn check_lens(expected: usize, others: &[usize]) -> Result<()> {
    if let Some(bad) = others.iter().find(|&&n| n != expected) {
        return Err(usage_err(format!(
            "optimizer buffers disagree: {bad} entries against {expected} parameters"
        )));
    }
    Ok(())
}

/// `lr0 · ½ · (1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(usage_err("cosine schedule needs at least one step"));
    }
    if step > total {
        return Err(usage_err(format!("step {step} is past the schedule end {total}")));
    }
    let frac = step as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, PartialEq)]
struct Slot<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Accumulators for a list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            slots: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every group with learning rate `lr`. Group sizes are
    /// fixed by the first call.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(usage_err(format!(
                "{} parameter groups but {} gradient groups",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            let needs_first = self.config.kind == OptimizerKind::Adam;
            self.slots = params
                .iter()
                .map(|p| Slot {
                    first: if needs_first { vec![T::zero(); p.len()] } else { Vec::new() },
                    second: vec![T::zero(); p.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len()
            || self.slots.iter().zip(params.iter()).any(|(s, p)| s.second.len() != p.len())
        {
            return Err(usage_err("parameter groups changed shape between steps"));
        }
        self.step += 1;
        let lr = T::of(lr);
        let c = &self.config;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            match c.kind {
                OptimizerKind::Sgd => sgd_update(p, g, lr)?,
                OptimizerKind::Rmsprop => {
                    rmsprop_update(p, g, &mut slot.second, lr, T::of(c.rho), T::of(c.eps))?
                }
                OptimizerKind::Adam => adam_update(
                    p,
                    g,
                    &mut slot.first,
                    &mut slot.second,
                    self.step,
                    lr,
                    T::of(c.beta1),
                    T::of(c.beta2),
                    T::of(c.eps),
                )?,
            }
        }
        Ok(())
    }
}
