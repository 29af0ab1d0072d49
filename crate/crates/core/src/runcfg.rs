//! Run configuration resolution: defaults, then a TOML file, then
//! command-line overrides. The resolved value is written back into the
//! run directory so a run can be reproduced from that echo alone.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::nets::BlockConfig;
use crate::train::TrainConfig;

/// Everything a run needs beyond its output directory. Defaults cover
/// every field; a config file and then flag overrides refine them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// Network dimensions shared by all blocks.
    pub block: BlockConfig,
    /// Training schedules, loss weights, ablation flags, and the seed.
    pub train: TrainConfig,
    /// Synthetic-corpus shape, used by the synth command.
    pub synth: SynthSpec,
    /// Input artifacts. Paths are stored absolute in the echo.
    pub paths: RunPaths,
}

/// Input locations. Each command reads the subset it needs and rejects
/// runs where a required path is missing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    /// Training manifest, two domains.
    pub train_manifest: Option<PathBuf>,
    /// Held-out manifest for validation and evaluation.
    pub eval_manifest: Option<PathBuf>,
    /// Stage-1 landmark-branch checkpoint, consumed by the train command.
    pub pretrained: Option<PathBuf>,
    /// Network-set checkpoint, consumed by eval, or a train run directory
    /// holding per-epoch checkpoints, consumed by finetune.
    pub checkpoint: Option<PathBuf>,
}

/// The three ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Adversarial separation alone: no landmark multi-task transfer, no
    /// intermediate alignment supervisors.
    Bl,
    /// Adds the multi-task landmark path on top of the baseline.
    Ml,
    /// The full model: multi-task path plus all six alignment pairs.
    AsFull,
}

impl Ablation {
    pub fn apply(self, train: &mut TrainConfig) {
        match self {
            Ablation::Bl => {
                train.enable_ml = false;
                train.enable_as = false;
            }
            Ablation::Ml => {
                train.enable_ml = true;
                train.enable_as = false;
            }
            Ablation::AsFull => {
                train.enable_ml = true;
                train.enable_as = true;
            }
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BL" => Ok(Ablation::Bl),
            "ML" => Ok(Ablation::Ml),
            "AS-full" => Ok(Ablation::AsFull),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}'; expected BL, ML, or AS-full"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Bl => "BL",
            Ablation::Ml => "ML",
            Ablation::AsFull => "AS-full",
        })
    }
}

/// Flag-level overrides, applied after the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    /// Dotted weight overrides: the `c` in `--weights.c 100`.
    pub weights: Vec<(String, f64)>,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunSpec {
    /// Parse a spec from TOML text. Unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config not serializable: {e}")))
    }

    /// Write the resolved echo. Re-running with `--config` on this file
    /// and no further flags reproduces the run.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("resolved.toml");
        std::fs::write(&path, self.to_toml()?)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    /// Make every configured path absolute against the working directory,
    /// so the echo stays valid from anywhere.
    pub fn absolutize_paths(&mut self) -> Result<()> {
        for slot in [
            &mut self.paths.train_manifest,
            &mut self.paths.eval_manifest,
            &mut self.paths.pretrained,
            &mut self.paths.checkpoint,
        ] {
            if let Some(p) = slot.take() {
                let abs = std::path::absolute(&p).map_err(|e| {
                    Error::Config(format!("cannot resolve path {}: {e}", p.display()))
                })?;
                *slot = Some(abs);
            }
        }
        Ok(())
    }
}

/// Defaults, overlaid by the file when given, overlaid by the flags.
/// Validates the training section and echoes nothing; callers decide
/// where the echo goes.
pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunSpec> {
    let mut spec = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunSpec::from_toml(&text)?
        }
        None => RunSpec::default(),
    };

    if let Some(seed) = ov.seed {
        spec.train.seed = seed;
    }
    if let Some(ab) = ov.ablation {
        ab.apply(&mut spec.train);
    }
    for (name, value) in &ov.weights {
        spec.train.weights.set(name, *value)?;
    }
    if let Some(p) = &ov.train_manifest {
        spec.paths.train_manifest = Some(p.clone());
    }
    if let Some(p) = &ov.eval_manifest {
        spec.paths.eval_manifest = Some(p.clone());
    }
    if let Some(p) = &ov.pretrained {
        spec.paths.pretrained = Some(p.clone());
    }
    if let Some(p) = &ov.checkpoint {
        spec.paths.checkpoint = Some(p.clone());
    }

    spec.train.validate()?;
    spec.block.validate()?;
    spec.synth.validate()?;
    spec.absolutize_paths()?;
    Ok(spec)
}
