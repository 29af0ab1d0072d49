//! Training configuration and the stage-2 learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::BlockConfig;

/// Epochs per learning-rate group in the default stage-2 decay.
pub const LR_GROUP_LEN: usize = 4;

/// Hard ceiling on stage-2 epochs.
pub const MAX_STAGE2_EPOCHS: usize = 12;

/// Stage-1 landmark-branch pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps; the epoch in progress is cut short
    /// when the cap is hit, after one final validation pass.
    pub max_steps: Option<u64>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { lr: 1e-4, batch: 8, epochs: 20, max_steps: None }
    }
}

/// Stage-2 adversarial training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Explicit per-epoch learning rates. Overrides the grouped decay; must
    /// cover every epoch and never increase.
    pub lr_table: Option<Vec<f64>>,
    /// Discriminator updates per paired batch. The generator always takes
    /// exactly one.
    pub disc_steps: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config { lr: 1e-4, batch: 8, epochs: 12, lr_table: None, disc_steps: 1 }
    }
}

/// Post-selection fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Applied to the stage-2 base learning rate.
    pub lr_multiplier: f64,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { lr_multiplier: 0.1, epochs: 0 }
    }
}

/// Everything a training run needs beyond the network dimensions and the
/// data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Transfer the pretrained branch into the extractor and keep training
    /// the landmark task jointly through the feature-landmark loss.
    pub enable_ml: bool,
    /// Use all six supervisor pairs with learned projectors. Off restricts
    /// the alignment loss to the two full-cycle pairs through identity
    /// projectors.
    pub enable_as: bool,
    pub weights: LossWeights,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub finetune: FinetuneConfig,
    /// Random-crop augmentation size. When set it must match the network
    /// resolution; stored images must be at least this large.
    pub crop: Option<usize>,
    /// Batch size for validation and evaluation forward passes.
    pub val_batch: usize,
    /// Decision threshold for action-unit evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            enable_ml: true,
            enable_as: true,
            weights: LossWeights::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            finetune: FinetuneConfig::default(),
            crop: None,
            val_batch: 16,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (what, lr) in [("stage 1", self.stage1.lr), ("stage 2", self.stage2.lr)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{what} learning rate {lr} must be positive")));
            }
        }
        for (what, b) in [
            ("stage 1", self.stage1.batch),
            ("stage 2", self.stage2.batch),
            ("validation", self.val_batch),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{what} batch size must be positive")));
            }
        }
        if self.stage2.epochs > MAX_STAGE2_EPOCHS {
            return Err(Error::Config(format!(
                "stage 2 runs at most {MAX_STAGE2_EPOCHS} epochs, got {}",
                self.stage2.epochs
            )));
        }
        if self.stage2.disc_steps == 0 {
            return Err(Error::Config("disc_steps must be at least 1".into()));
        }
        if let Some(table) = &self.stage2.lr_table {
            if table.len() < self.stage2.epochs {
                return Err(Error::Config(format!(
                    "lr table covers {} epochs but stage 2 has {}",
                    table.len(),
                    self.stage2.epochs
                )));
            }
            for (i, &lr) in table.iter().enumerate() {
                if !lr.is_finite() || lr <= 0.0 {
                    return Err(Error::Config(format!(
                        "lr table entry {i} is {lr}; entries must be positive"
                    )));
                }
                if i > 0 && lr > table[i - 1] {
                    return Err(Error::Config(format!(
                        "lr table increases at entry {i} ({} -> {lr}); the schedule must be \
                         monotone non-increasing",
                        table[i - 1]
                    )));
                }
            }
        }
        if !self.finetune.lr_multiplier.is_finite() || self.finetune.lr_multiplier <= 0.0 {
            return Err(Error::Config(format!(
                "fine-tune lr multiplier {} must be positive",
                self.finetune.lr_multiplier
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "decision threshold {} must lie strictly inside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Pair mask for the alignment loss under the current ablation flags.
    pub fn enabled_pairs(&self) -> [bool; 6] {
        if self.enable_as {
            [true; 6]
        } else {
            [true, true, false, false, false, false]
        }
    }

    /// Block dimensions adjusted for the ablation flags: with the alignment
    /// supervisor off the projectors collapse to identities.
    pub fn derive_block(&self, block: &BlockConfig) -> BlockConfig {
        let mut b = block.clone();
        if !self.enable_as {
            b.identity_projectors = true;
        }
        b
    }
}

/// Learning rate for a 0-based stage-2 epoch. With no explicit table the
/// epochs split into groups of [`LR_GROUP_LEN`]; group g of n runs at
/// base * (n - g) / n, reaching 0 one group past the last. Twelve epochs
/// therefore run at 1, 2/3, and 1/3 of the base rate.
pub fn lr_for_epoch(
    base: f64,
    epoch: usize,
    total_epochs: usize,
    table: Option<&[f64]>,
) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Train(format!(
            "epoch index {epoch} out of range for a {total_epochs}-epoch schedule"
        )));
    }
    if let Some(t) = table {
        return Ok(t[epoch]);
    }
    let n_groups = total_epochs.div_ceil(LR_GROUP_LEN);
    let g = epoch / LR_GROUP_LEN;
    Ok(base * (n_groups - g) as f64 / n_groups as f64)
}
