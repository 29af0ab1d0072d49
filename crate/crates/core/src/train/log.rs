//! Line-delimited run records with finiteness and ordering checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Domain-discriminator readouts taken during a generator step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscScores {
    /// Mean score over both cross-domain reconstructions.
    pub recon_mean: f64,
    /// Mean score on genuine source features.
    pub real_source: f64,
    /// Mean score on genuine target features.
    pub real_target: f64,
}

impl DiscScores {
    fn validate(&self, step: u64) -> Result<()> {
        for (name, v) in [
            ("recon_mean", self.recon_mean),
            ("real_source", self.real_source),
            ("real_target", self.real_target),
        ] {
            if !v.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite discriminator score '{name}' at step {step}"
                )));
            }
        }
        Ok(())
    }
}

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: String,
    /// 1-based epoch of the owning stage.
    pub epoch: usize,
    pub lr: f64,
    /// Component values, keyed by loss name, plus "total".
    pub losses: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<DiscScores>,
}

/// One per-epoch validation measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub stage: String,
    pub metric: String,
    pub value: f64,
}

/// Full history of a run: every update, every validation pass, and free-form
/// notes. Records are validated as they are pushed, so a stored log never
/// holds a non-finite loss or an out-of-order step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
    pub notes: Vec<String>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an update record. Steps must increase strictly and every
    /// recorded number must be finite; violations are rejected naming the
    /// offending component and step.
    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(Error::Train(format!(
                    "step {} recorded after step {}; steps must increase strictly",
                    rec.step, last.step
                )));
            }
        }
        if !rec.lr.is_finite() {
            return Err(Error::Train(format!(
                "non-finite learning rate at step {}",
                rec.step
            )));
        }
        for (name, v) in &rec.losses {
            if !v.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss component '{name}' at step {}",
                    rec.step
                )));
            }
        }
        if let Some(s) = &rec.scores {
            s.validate(rec.step)?;
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn push_validation(
        &mut self,
        epoch: usize,
        stage: &str,
        metric: &str,
        value: f64,
    ) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Train(format!(
                "non-finite validation metric '{metric}' at epoch {epoch}"
            )));
        }
        self.validations.push(ValRecord {
            epoch,
            stage: stage.to_string(),
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    pub fn push_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn last_step(&self) -> u64 {
        self.steps.last().map_or(0, |r| r.step)
    }

    /// Every logged loss value in record order as exact bit patterns, for
    /// bit-for-bit reproducibility comparisons.
    pub fn loss_sequence(&self) -> Vec<u64> {
        self.steps
            .iter()
            .flat_map(|r| r.losses.values().map(|v| v.to_bits()))
            .collect()
    }

    /// Reconstruction scores of every generator step in order, for
    /// equilibrium checks over a trailing window.
    pub fn recon_scores(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|r| r.scores.map(|s| s.recon_mean)).collect()
    }

    /// One JSON object per line: steps, then validations, then notes, each
    /// tagged with a "kind" field.
    pub fn to_jsonl(&self) -> Result<String> {
        fn tag(value: serde_json::Value, kind: &str) -> Result<String> {
            let mut v = value;
            v.as_object_mut()
                .ok_or_else(|| Error::Train("log record did not serialize to an object".into()))?
                .insert("kind".to_string(), serde_json::Value::String(kind.to_string()));
            serde_json::to_string(&v).map_err(|e| Error::Train(format!("log serialization: {e}")))
        }
        let mut out = String::new();
        for rec in &self.steps {
            let v = serde_json::to_value(rec)
                .map_err(|e| Error::Train(format!("log serialization: {e}")))?;
            out.push_str(&tag(v, "step")?);
            out.push('\n');
        }
        for rec in &self.validations {
            let v = serde_json::to_value(rec)
                .map_err(|e| Error::Train(format!("log serialization: {e}")))?;
            out.push_str(&tag(v, "val")?);
            out.push('\n');
        }
        for note in &self.notes {
            let v = serde_json::json!({ "kind": "note", "text": note });
            out.push_str(
                &serde_json::to_string(&v)
                    .map_err(|e| Error::Train(format!("log serialization: {e}")))?,
            );
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}
