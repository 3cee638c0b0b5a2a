use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup: usize,
    pub iters_base: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub lambda_phy: f64,
    /// Chunk length; must equal the model horizon.
    pub horizon: usize,
    /// Euler steps when sampling.
    pub k_sample: usize,
    pub seed: u64,
    /// Keep the observation encoder frozen during joint fine-tuning.
    pub freeze_encoder: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            peak_lr: 1e-4,
            betas: (0.95, 0.999),
            weight_decay: 1e-5,
            warmup: 100,
            iters_base: 2000,
            iters_stage1: 1000,
            iters_stage2: 2000,
            lambda_phy: 0.1,
            horizon: 8,
            k_sample: 10,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("warmup", self.warmup),
            ("iters_base", self.iters_base),
            ("iters_stage1", self.iters_stage1),
            ("iters_stage2", self.iters_stage2),
            ("horizon", self.horizon),
            ("k_sample", self.k_sample),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("training.{name} must be positive")));
        }
        if !(self.lambda_phy >= 0.0 && self.lambda_phy.is_finite()) {
            return Err(Error::Invalid(format!("training.lambda_phy {} must be non-negative", self.lambda_phy)));
        }
        self.optimizer(1)?.validate()
    }

    /// Optimizer for a phase of `iters` updates.
    pub fn optimizer(&self, iters: usize) -> Result<AdamWConfig> {
        let c = AdamWConfig {
            peak_lr: self.peak_lr,
            betas: self.betas,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup,
            total_steps: iters,
        };
        c.validate()?;
        Ok(c)
    }
}
