//! Optimisation: learning-rate schedule, Adam, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    Checkpoint, RngState, CHECKPOINT_MAGIC,
};
pub use trainer::{resume_training, run_training, StepLog, Trainer, LOG_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Exponent of the polynomial learning-rate decay.
pub const LR_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha0: f64,
    pub total_epochs: u64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_dice_eps")]
    pub dice_eps: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_dice_eps() -> f64 {
    crate::losses::DICE_EPS
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    /// Full-scale schedule: α₀ = 5e-5, 300 epochs, batch 8.
    pub fn full_scale() -> Self {
        Self {
            alpha0: 5e-5,
            total_epochs: 300,
            steps_per_epoch: 27,
            batch_size: 8,
            seed: 0,
            dice_eps: default_dice_eps(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    /// Single-crop overfitting run used as a desk-scale sanity check.
    pub fn overfit(steps: u64) -> Self {
        Self {
            alpha0: 1e-2,
            total_epochs: steps,
            steps_per_epoch: 1,
            batch_size: 1,
            ..Self::full_scale()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 {} must be positive", self.alpha0)));
        }
        if self.total_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("total_epochs and steps_per_epoch must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `α₀ · (1 − e/Nₑ)^0.9`.
pub fn lr_at(epoch: u64, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(contract(
            "lr_at",
            format!("epoch {epoch} exceeds total_epochs {}", cfg.total_epochs),
        ));
    }
    Ok(cfg.alpha0 * (1.0 - epoch as f64 / cfg.total_epochs as f64).powf(LR_POWER))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(lr_at(0, &cfg).unwrap(), 5e-5);
        assert_eq!(lr_at(300, &cfg).unwrap(), 0.0);
        assert!((lr_at(150, &cfg).unwrap() - 2.679e-5).abs() < 1e-8);
        assert!(lr_at(301, &cfg).is_err());
    }

    #[test]
    fn schedule_strictly_decreases() {
        let cfg = TrainConfig::full_scale();
        let lrs: Vec<f64> = (0..=300).map(|e| lr_at(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig::overfit(500);
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("alpha0 = 0.0\ntotal_epochs = 1\nsteps_per_epoch = 1\nbatch_size = 1\nseed = 0").is_err());
    }
}
