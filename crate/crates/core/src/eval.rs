//! Per-unit F1 and accuracy from streaming confusion counts.
//!
//! Counts are mergeable: updating shards independently and summing them
//! gives the same metrics as one sequential pass, in any sample order.

use crate::error::{Error, Result};

/// Streaming confusion counts, one (tp, fp, tn, fn) cell per action unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    tn: Vec<u64>,
    fneg: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_au: usize) -> Result<Self> {
        if n_au == 0 {
            return Err(Error::Eval("need at least one action unit".into()));
        }
        Ok(Self {
            tp: vec![0; n_au],
            fp: vec![0; n_au],
            tn: vec![0; n_au],
            fneg: vec![0; n_au],
        })
    }

    /// Builds counts from per-unit cells, enforcing that every unit saw
    /// the same number of samples.
    pub fn from_cells(cells: &[(u64, u64, u64, u64)]) -> Result<Self> {
        let mut counts = Self::new(cells.len())?;
        for (k, &(tp, fp, tn, fneg)) in cells.iter().enumerate() {
            counts.tp[k] = tp;
            counts.fp[k] = fp;
            counts.tn[k] = tn;
            counts.fneg[k] = fneg;
        }
        let total = counts.total();
        for k in 0..counts.n_au() {
            let t = counts.tp[k] + counts.fp[k] + counts.tn[k] + counts.fneg[k];
            if t != total {
                return Err(Error::Eval(format!(
                    "unit {k} saw {t} samples but unit 0 saw {total}"
                )));
            }
        }
        Ok(counts)
    }

    pub fn n_au(&self) -> usize {
        self.tp.len()
    }

    /// Samples seen so far. Identical across units by construction.
    pub fn total(&self) -> u64 {
        self.tp[0] + self.fp[0] + self.tn[0] + self.fneg[0]
    }

    /// Scores one sample. A probability at or above the threshold is a
    /// positive prediction.
    pub fn update(&mut self, probs: &[f64], labels: &[u8], threshold: f64) -> Result<()> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Eval(format!(
                "threshold must lie strictly inside (0, 1), got {threshold}"
            )));
        }
        let n = self.n_au();
        if probs.len() != n || labels.len() != n {
            return Err(Error::Eval(format!(
                "expected {n} probabilities and labels, got {} and {}",
                probs.len(),
                labels.len()
            )));
        }
        for (k, (&p, &y)) in probs.iter().zip(labels).enumerate() {
            if !p.is_finite() {
                return Err(Error::Eval(format!("non-finite probability for unit {k}")));
            }
            if y > 1 {
                return Err(Error::Eval(format!("label for unit {k} must be 0 or 1, got {y}")));
            }
        }
        // Validation above is complete, so a rejected sample never leaves
        // partial increments behind.
        for (k, (&p, &y)) in probs.iter().zip(labels).enumerate() {
            match (p >= threshold, y == 1) {
                (true, true) => self.tp[k] += 1,
                (true, false) => self.fp[k] += 1,
                (false, false) => self.tn[k] += 1,
                (false, true) => self.fneg[k] += 1,
            }
        }
        Ok(())
    }

    /// Adds another shard's counts into this one.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.n_au() != self.n_au() {
            return Err(Error::Eval(format!(
                "cannot merge counts over {} units into counts over {}",
                other.n_au(),
                self.n_au()
            )));
        }
        for k in 0..self.n_au() {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.tn[k] += other.tn[k];
            self.fneg[k] += other.fneg[k];
        }
        Ok(())
    }

    pub fn cell(&self, unit: usize) -> (u64, u64, u64, u64) {
        (self.tp[unit], self.fp[unit], self.tn[unit], self.fneg[unit])
    }

    /// 2tp / (2tp + fp + fn), with the empty denominator defined as 0.
    pub fn f1(&self, unit: usize) -> f64 {
        let denom = 2 * self.tp[unit] + self.fp[unit] + self.fneg[unit];
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp[unit] as f64 / denom as f64
        }
    }

    pub fn accuracy(&self, unit: usize) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Eval("accuracy is undefined before any samples".into()));
        }
        Ok((self.tp[unit] + self.tn[unit]) as f64 / total as f64)
    }

    pub fn mean_f1(&self) -> f64 {
        (0..self.n_au()).map(|k| self.f1(k)).sum::<f64>() / self.n_au() as f64
    }

    pub fn mean_accuracy(&self) -> Result<f64> {
        let mut sum = 0.0;
        for k in 0..self.n_au() {
            sum += self.accuracy(k)?;
        }
        Ok(sum / self.n_au() as f64)
    }

    /// Human-readable table: one row per unit plus an unweighted average,
    /// percentages with two decimals. Byte-stable for identical counts.
    pub fn report_text(&self) -> Result<String> {
        let mut out = String::from("unit        f1%      acc%\n");
        for k in 0..self.n_au() {
            out.push_str(&format!(
                "au_{k:<5} {:>8.2} {:>9.2}\n",
                100.0 * self.f1(k),
                100.0 * self.accuracy(k)?
            ));
        }
        out.push_str(&format!(
            "avg      {:>8.2} {:>9.2}\n",
            100.0 * self.mean_f1(),
            100.0 * self.mean_accuracy()?
        ));
        Ok(out)
    }

    /// Tab-delimited table with raw fractions, for machine consumption.
    pub fn report_tsv(&self) -> Result<String> {
        let mut out = String::from("unit\tf1\taccuracy\ttp\tfp\ttn\tfn\n");
        for k in 0..self.n_au() {
            let (tp, fp, tn, fneg) = self.cell(k);
            out.push_str(&format!(
                "au_{k}\t{:.6}\t{:.6}\t{tp}\t{fp}\t{tn}\t{fneg}\n",
                self.f1(k),
                self.accuracy(k)?
            ));
        }
        out.push_str(&format!(
            "avg\t{:.6}\t{:.6}\t\t\t\t\n",
            self.mean_f1(),
            self.mean_accuracy()?
        ));
        Ok(out)
    }
}
