use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

/// AdamW hyperparameters and the linear-warmup + cosine schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.peak_lr > 0.0
            && (0.0..1.0).contains(&b1)
            && b1 > 0.0
            && (0.0..1.0).contains(&b2)
            && b2 > 0.0
            && self.weight_decay >= 0.0
            && self.warmup_steps >= 1
            && self.total_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad optimizer config {self:?}")))
        }
    }

    /// Learning rate at `step`: linear ramp from 0 to the peak over the warmup,
    /// then cosine decay to 0 at `total_steps`. Steps past the end clamp to 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.peak_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, moments: HashMap::new() })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.config.lr_at(step)
    }

    /// Learning rate the next call to [`adamw_step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.lr_at(self.step + 1)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }
}

/// One bias-corrected AdamW update with decoupled weight decay over every
/// trainable parameter. Frozen parameters are skipped entirely. Gradients are
/// cleared afterwards.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.requires_grad && p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    let t = state.step + 1;
    let lr = state.lr_at(t);
    let (b1, b2) = state.config.betas;
    let wd = state.config.weight_decay;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for p in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let n = p.value.numel();
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * *w);
        }
    }
    state.step = t;
    Ok(())
}
