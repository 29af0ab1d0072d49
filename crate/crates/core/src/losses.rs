//! Loss terms of the separation/reconstruction objective and their
//! weighted combination.
//!
//! Six scalars feed the total: the cross-cycle alignment loss (`c`), the
//! cooperative landmark-feature loss (`l`), the adversarial landmark pair
//! (`adl`), the adversarial domain pair (`adf`), the action-unit detection
//! loss (`au`), and the multi-task landmark-branch loss (`fl`). The two
//! adversarial terms come as (discriminator-step, generator-step) pairs;
//! the trainer decides which member enters which update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::nets::{d_domain_forward, d_landmark_forward, project, BlockConfig, Lease, NetworkSet};

/// Probabilities are clamped to this interval before any logarithm.
pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

/// Names of the six alignment supervisor pairs, in bundle order:
/// the two whole-feature cycles first, then the four separated parts.
pub const PAIR_NAMES: [&str; 6] = [
    "s_cycle/s",
    "t_cycle/t",
    "sl_r2/sl",
    "sb_r2/sb",
    "tl_r2/tl",
    "tb_r2/tb",
];

/// Per-term weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Cross-cycle alignment weight.
    pub c: f64,
    /// Cooperative landmark-feature weight.
    pub l: f64,
    /// Adversarial landmark weight (applies to both members).
    pub adl: f64,
    /// Adversarial domain weight (applies to both members).
    pub adf: f64,
    /// Action-unit detection weight.
    pub au: f64,
    /// Multi-task landmark-branch weight.
    pub fl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { c: 100.0, l: 0.6, adl: 400.0, adf: 1.2, au: 1.0, fl: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.entries() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Loss(format!(
                    "weight '{name}' must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("c", self.c),
            ("l", self.l),
            ("adl", self.adl),
            ("adf", self.adf),
            ("au", self.au),
            ("fl", self.fl),
        ]
    }

    /// Set one weight by name; used by the command line override path.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "c" => &mut self.c,
            "l" => &mut self.l,
            "adl" => &mut self.adl,
            "adf" => &mut self.adf,
            "au" => &mut self.au,
            "fl" => &mut self.fl,
            other => {
                return Err(Error::Loss(format!(
                    "unknown loss weight '{other}' (expected one of c, l, adl, adf, au, fl)"
                )))
            }
        };
        *slot = value;
        self.validate()
    }
}

/// Normalized landmark coordinates plus the inter-ocular distance that
/// scales the squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTarget {
    /// Interleaved (x, y) pairs, length 2 * n_land.
    pub coords: Vec<f64>,
    /// Inter-ocular distance in the same normalized units, > 0.
    pub d: f64,
}

impl LandmarkTarget {
    pub fn new(coords: Vec<f64>, d: f64) -> Result<Self> {
        let t = LandmarkTarget { coords, d };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(Error::Loss(format!(
                "inter-ocular distance must be > 0 and finite, got {}",
                self.d
            )));
        }
        if self.coords.is_empty() || self.coords.len() % 2 != 0 {
            return Err(Error::Loss(format!(
                "landmark coords must hold a non-empty even number of values, got {}",
                self.coords.len()
            )));
        }
        if self.coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Loss("landmark coords contain a non-finite value".into()));
        }
        Ok(())
    }
}

/// Per-sample action-unit labels with the class weights fixed from the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuTarget {
    /// One value per action unit, each 0 or 1.
    pub labels: Vec<f64>,
    /// One positive weight per action unit.
    pub class_weights: Vec<f64>,
}

impl AuTarget {
    pub fn new(labels: Vec<f64>, class_weights: Vec<f64>) -> Result<Self> {
        let t = AuTarget { labels, class_weights };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.labels.len() != self.class_weights.len() {
            return Err(Error::Loss(format!(
                "labels ({}) and class weights ({}) must be non-empty and equal length",
                self.labels.len(),
                self.class_weights.len()
            )));
        }
        if self.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Loss("action-unit labels must be 0 or 1".into()));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Loss("class weights must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Inverse-frequency class weights: w_i = (1/r_i) / ((1/n) * sum_j 1/r_j)
/// where r_i is the occurrence rate of unit i in the training split. The
/// weights average to 1, so uniform rates give uniform unit weights.
pub fn class_weights_from_rates(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::Loss("occurrence rates are empty".into()));
    }
    for (i, r) in rates.iter().enumerate() {
        if !r.is_finite() || *r <= 0.0 || *r >= 1.0 {
            return Err(Error::Loss(format!(
                "occurrence rate for unit {i} must lie strictly in (0, 1), got {r}"
            )));
        }
    }
    let inv: Vec<f64> = rates.iter().map(|r| 1.0 / r).collect();
    let mean_inv = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.iter().map(|v| v / mean_inv).collect())
}

fn check_batch(pred_shape: &[usize], n_targets: usize, what: &str) -> Result<(usize, usize)> {
    if pred_shape.len() != 2 {
        return Err(Error::Loss(format!(
            "{what} predictions must be 2-D [batch, values], got {pred_shape:?}"
        )));
    }
    let (n, m) = (pred_shape[0], pred_shape[1]);
    if n != n_targets {
        return Err(Error::Loss(format!(
            "{what}: batch size {n} does not match {n_targets} targets"
        )));
    }
    Ok((n, m))
}

/// Inter-ocular-normalized squared landmark error, averaged over the batch:
/// for each sample, (1 / (2 d^2)) * sum of squared coordinate differences.
pub fn landmark_loss(
    tape: &mut Tape,
    pred: TensorId,
    targets: &[LandmarkTarget],
) -> Result<TensorId> {
    let shape = tape.shape(pred).to_vec();
    let (n, m) = check_batch(&shape, targets.len(), "landmark")?;
    let mut coords = Vec::with_capacity(n * m);
    let mut factors = Vec::with_capacity(n);
    for t in targets {
        t.validate()?;
        if t.coords.len() != m {
            return Err(Error::Loss(format!(
                "landmark target holds {} coords, predictions have {m}",
                t.coords.len()
            )));
        }
        coords.extend_from_slice(&t.coords);
        factors.push(1.0 / (2.0 * t.d * t.d));
    }
    let target = tape.constant(&Tensor::new(vec![n, m], coords)?)?;
    let factor = tape.constant(&Tensor::new(vec![n], factors)?)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let scaled = tape.row_scale(sq, factor)?;
    let total = tape.sum(scaled)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Cross-cycle alignment loss over explicit (reconstructed, original)
/// feature pairs. Pair i runs its reconstructed side through projector
/// (i+1, 1) and its original side through projector (i+1, 2), then takes
/// the elementwise L1 distance summed over channels and space, normalized
/// by h * w, and averaged over the batch. Disabled pairs contribute
/// nothing; an enabled pair that is absent is an error naming it.
pub fn alignment_loss_pairs(
    cfg: &BlockConfig,
    tape: &mut Tape,
    set: &NetworkSet,
    pairs: &[Option<(TensorId, TensorId)>; 6],
    enabled: &[bool; 6],
    mode: Lease,
) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for (i, slot) in pairs.iter().enumerate() {
        if !enabled[i] {
            continue;
        }
        let (recon, orig) = slot.ok_or_else(|| {
            Error::Loss(format!("alignment pair '{}' is missing", PAIR_NAMES[i]))
        })?;
        let pa = project(cfg, tape, set.projector(i + 1, 1)?, recon, mode)?;
        let pb = project(cfg, tape, set.projector(i + 1, 2)?, orig, mode)?;
        let sa = tape.shape(pa).to_vec();
        let sb = tape.shape(pb).to_vec();
        if sa != sb || sa.len() != 4 {
            return Err(Error::Loss(format!(
                "alignment pair '{}' has mismatched projected shapes {sa:?} vs {sb:?}",
                PAIR_NAMES[i]
            )));
        }
        let (n, h, w) = (sa[0], sa[2], sa[3]);
        let diff = tape.sub(pa, pb)?;
        let dist = tape.abs(diff)?;
        let summed = tape.sum(dist)?;
        let term = tape.scale(summed, 1.0 / (n * h * w) as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(acc) => Ok(acc),
        None => tape.constant_scalar(0.0),
    }
}

/// Alignment loss over a full feature bundle with a pair mask. The mask
/// order matches [`PAIR_NAMES`]; passing all-true evaluates the full
/// six-pair objective.
pub fn contrastive_alignment_loss(
    cfg: &BlockConfig,
    tape: &mut Tape,
    set: &NetworkSet,
    bundle: &crate::nets::FeatureBundle,
    enabled: &[bool; 6],
    mode: Lease,
) -> Result<TensorId> {
    let pairs = bundle.supervisor_pairs().map(Some);
    alignment_loss_pairs(cfg, tape, set, &pairs, enabled, mode)
}

/// Weighted multi-label cross entropy over per-unit probabilities,
/// averaged over units and batch. Probabilities are clamped away from 0
/// and 1 before the logarithms, so any input in [0, 1] is safe.
pub fn au_loss(tape: &mut Tape, probs: TensorId, targets: &[AuTarget]) -> Result<TensorId> {
    let shape = tape.shape(probs).to_vec();
    let (n, n_au) = check_batch(&shape, targets.len(), "action-unit")?;
    let mut pos = Vec::with_capacity(n * n_au);
    let mut neg = Vec::with_capacity(n * n_au);
    let norm = -1.0 / (n_au as f64 * n as f64);
    for t in targets {
        t.validate()?;
        if t.labels.len() != n_au {
            return Err(Error::Loss(format!(
                "action-unit target holds {} labels, predictions have {n_au}",
                t.labels.len()
            )));
        }
        for (y, w) in t.labels.iter().zip(&t.class_weights) {
            pos.push(norm * w * y);
            neg.push(norm * w * (1.0 - y));
        }
    }
    let pos = tape.constant(&Tensor::new(vec![n, n_au], pos)?)?;
    let neg = tape.constant(&Tensor::new(vec![n, n_au], neg)?)?;
    let p = tape.clamp(probs, PROB_CLAMP_LO, PROB_CLAMP_HI)?;
    let ln_p = tape.ln(p)?;
    let one_minus = tape.affine(p, -1.0, 1.0)?;
    let ln_q = tape.ln(one_minus)?;
    let hit = tape.mul(ln_p, pos)?;
    let miss = tape.mul(ln_q, neg)?;
    let both = tape.add(hit, miss)?;
    tape.sum(both)
}

/// Cooperative landmark-feature loss: the landmark discriminator reads
/// coordinates from both landmark-related features and is scored against
/// the per-domain targets. The two domain terms are summed.
pub fn landmark_feature_loss(
    tape: &mut Tape,
    disc: &ParamStore,
    f_sl: TensorId,
    f_tl: TensorId,
    source: &[LandmarkTarget],
    target: &[LandmarkTarget],
    disc_mode: Lease,
) -> Result<TensorId> {
    if target.is_empty() {
        return Err(Error::Loss("landmark pseudo-targets for the target domain are missing".into()));
    }
    let pred_s = d_landmark_forward(tape, disc, f_sl, disc_mode)?;
    let loss_s = landmark_loss(tape, pred_s, source)?;
    let pred_t = d_landmark_forward(tape, disc, f_tl, disc_mode)?;
    let loss_t = landmark_loss(tape, pred_t, target)?;
    tape.add(loss_s, loss_t)
}

/// A two-member adversarial term. The discriminator update minimizes
/// `d_step`; the generator update minimizes `g_step`. Only one member is
/// ever sent backward on a given tape.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialPair {
    pub d_step: TensorId,
    pub g_step: TensorId,
}

/// Adversarial landmark pair over background features.
///
/// Discriminator member: the landmark discriminator (trainable lease)
/// tries to recover the true per-domain landmarks from detached
/// background features. Generator member: with the discriminator frozen,
/// live background features are scored against the canonical mean face,
/// pushing the background generator toward landmark-free output. Both
/// members average their two domain terms.
pub fn adversarial_landmark_losses(
    tape: &mut Tape,
    disc: &ParamStore,
    f_sb: TensorId,
    f_tb: TensorId,
    source: &[LandmarkTarget],
    target: &[LandmarkTarget],
    mean_face: Option<&LandmarkTarget>,
) -> Result<AdversarialPair> {
    let mean_face = mean_face
        .ok_or_else(|| Error::Loss("canonical mean face is not configured".into()))?;
    mean_face.validate()?;

    let det_sb = tape.detach(f_sb);
    let det_tb = tape.detach(f_tb);
    let d_pred_s = d_landmark_forward(tape, disc, det_sb, Lease::Train)?;
    let d_loss_s = landmark_loss(tape, d_pred_s, source)?;
    let d_pred_t = d_landmark_forward(tape, disc, det_tb, Lease::Train)?;
    let d_loss_t = landmark_loss(tape, d_pred_t, target)?;
    let d_sum = tape.add(d_loss_s, d_loss_t)?;
    let d_step = tape.scale(d_sum, 0.5)?;

    let faces_s = vec![mean_face.clone(); source.len()];
    let faces_t = vec![mean_face.clone(); target.len()];
    let g_pred_s = d_landmark_forward(tape, disc, f_sb, Lease::Frozen)?;
    let g_loss_s = landmark_loss(tape, g_pred_s, &faces_s)?;
    let g_pred_t = d_landmark_forward(tape, disc, f_tb, Lease::Frozen)?;
    let g_loss_t = landmark_loss(tape, g_pred_t, &faces_t)?;
    let g_sum = tape.add(g_loss_s, g_loss_t)?;
    let g_step = tape.scale(g_sum, 0.5)?;

    Ok(AdversarialPair { d_step, g_step })
}

fn squared_gap_mean(tape: &mut Tape, score: TensorId, label: f64) -> Result<TensorId> {
    let gap = tape.affine(score, 1.0, -label)?;
    let sq = tape.mul(gap, gap)?;
    tape.mean(sq)
}

/// Least-squares adversarial domain pair.
///
/// Labels follow the background domain of each reconstructed feature:
/// genuine source features score 1, genuine target features score 0, the
/// source-landmark/target-background reconstruction scores 0 and its
/// mirror scores 1. The discriminator member judges detached copies of
/// all four inputs with a trainable lease; the generator member judges
/// the live reconstructed features with the discriminator frozen.
pub fn adversarial_domain_losses(
    tape: &mut Tape,
    disc: &ParamStore,
    f_s: TensorId,
    f_t: TensorId,
    f_sltb: TensorId,
    f_sbtl: TensorId,
) -> Result<AdversarialPair> {
    let mut d_step: Option<TensorId> = None;
    for (feat, label) in [(f_s, 1.0), (f_t, 0.0), (f_sltb, 0.0), (f_sbtl, 1.0)] {
        let det = tape.detach(feat);
        let score = d_domain_forward(tape, disc, det, Lease::Train)?;
        let term = squared_gap_mean(tape, score, label)?;
        d_step = Some(match d_step {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }

    let mut g_step: Option<TensorId> = None;
    for (feat, label) in [(f_sltb, 0.0), (f_sbtl, 1.0)] {
        let score = d_domain_forward(tape, disc, feat, Lease::Frozen)?;
        let term = squared_gap_mean(tape, score, label)?;
        g_step = Some(match g_step {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }

    Ok(AdversarialPair {
        d_step: d_step.expect("four discriminator terms"),
        g_step: g_step.expect("two generator terms"),
    })
}

/// Scalar handles to whichever loss terms participate in one update.
/// Absent terms contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub c: Option<TensorId>,
    pub l: Option<TensorId>,
    pub adl: Option<TensorId>,
    pub adf: Option<TensorId>,
    pub au: Option<TensorId>,
    pub fl: Option<TensorId>,
}

impl LossComponents {
    fn entries(&self) -> [(&'static str, Option<TensorId>); 6] {
        [
            ("c", self.c),
            ("l", self.l),
            ("adl", self.adl),
            ("adf", self.adf),
            ("au", self.au),
            ("fl", self.fl),
        ]
    }

    /// Current numeric value of every present component, for logging.
    pub fn values(&self, tape: &Tape) -> Vec<(&'static str, f64)> {
        self.entries()
            .iter()
            .filter_map(|(name, id)| {
                id.map(|id| (*name, tape.value(id).item().unwrap_or(f64::NAN)))
            })
            .collect()
    }
}

/// Weighted sum of the present components. Every present component must
/// be a finite scalar; a non-finite one is rejected by name.
pub fn total_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    parts: &LossComponents,
) -> Result<TensorId> {
    weights.validate()?;
    let lambda = weights.entries();
    let mut acc: Option<TensorId> = None;
    for (i, (name, part)) in parts.entries().into_iter().enumerate() {
        let Some(id) = part else { continue };
        let value = tape.value(id);
        if value.numel() != 1 {
            return Err(Error::Loss(format!(
                "component '{name}' must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        if !value.item()?.is_finite() {
            return Err(Error::NonFinite { context: format!("loss component '{name}'") });
        }
        let term = tape.scale(id, lambda[i].1)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant_scalar(0.0),
    }
}

/// Weighted total over plain component values, for log records and abort
/// diagnostics outside any tape. Rejects non-finite components by name.
pub fn weighted_total(weights: &LossWeights, parts: &[(&str, f64)]) -> Result<f64> {
    weights.validate()?;
    let lambda = weights.entries();
    let mut total = 0.0;
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("loss component '{name}'") });
        }
        let w = lambda
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, w)| *w)
            .ok_or_else(|| Error::Loss(format!("unknown loss component '{name}'")))?;
        total += w * v;
    }
    Ok(total)
}
