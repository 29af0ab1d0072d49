//! The two training stages, model selection, and evaluation forwards.
//!
//! Stage 1 pretrains the standalone landmark branch on source images.
//! Stage 2 alternates discriminator and generator updates over paired
//! two-domain batches: the discriminators learn from detached features,
//! then every non-discriminator module takes one step of the combined
//! objective with the discriminators frozen. Numeric failures abort the
//! stage and hand back the last state that completed an epoch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Optimizer, ParamStore, Tape};
use crate::data::{paired_batches, Dataset, PairedBatch};
use crate::error::{Error, Result};
use crate::eval::ConfusionCounts;
use crate::losses::{
    adversarial_domain_losses, adversarial_landmark_losses, au_loss, contrastive_alignment_loss,
    landmark_feature_loss, landmark_loss, total_loss, AuTarget, LandmarkTarget, LossComponents,
};
use crate::nets::{
    au_head_forward, d_domain_forward, extractor_forward, init_landmark_branch,
    landmark_branch_forward, landmark_tail_forward, transfer_init, BlockConfig, Lease, NetworkSet,
};
use crate::train::config::{lr_for_epoch, TrainConfig};
use crate::train::log::{DiscScores, RunLog, StepRecord};

/// Stage-1 result: the trained branch and its history. When an epoch ends
/// with a numeric failure the branch reverts to the best state seen so far
/// and `aborted` carries the diagnostic.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub branch: ParamStore,
    pub log: RunLog,
    /// 1-based epoch with the lowest validation error; ties keep the
    /// earlier epoch.
    pub best_epoch: Option<usize>,
    pub best_error: Option<f64>,
    pub aborted: Option<String>,
}

/// One stage-2 epoch boundary: the network state after the epoch and its
/// validation score when a validation set was supplied.
#[derive(Debug)]
pub struct EpochCheckpoint {
    /// 1-based.
    pub epoch: usize,
    pub set: NetworkSet,
    pub val_mean_f1: Option<f64>,
}

/// Stage-2 result. `set` is the final state, or the last epoch snapshot
/// when the run aborted.
#[derive(Debug)]
pub struct TrainOutcome {
    pub set: NetworkSet,
    pub log: RunLog,
    pub epochs: Vec<EpochCheckpoint>,
    pub aborted: Option<String>,
}

/// Confusion counts split by domain. `source`/`target` are present only
/// when the evaluated set held samples of that domain.
#[derive(Debug)]
pub struct AuEvaluation {
    pub overall: ConfusionCounts,
    pub source: Option<ConfusionCounts>,
    pub target: Option<ConfusionCounts>,
}

impl AuEvaluation {
    /// Metric used for checkpoint selection: mean F1 on the target domain
    /// when the validation set covers it, otherwise over everything.
    pub fn selection_f1(&self) -> f64 {
        match &self.target {
            Some(t) => t.mean_f1(),
            None => self.overall.mean_f1(),
        }
    }
}

// ── Shared plumbing ────────────────────────────────────────────────────

/// The stored image size must match what the network expects, either
/// directly or through the configured crop.
fn check_input_size(block: &BlockConfig, cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if let Some(c) = cfg.crop {
        if c != block.resolution {
            return Err(Error::Config(format!(
                "crop size {c} does not match the network resolution {}",
                block.resolution
            )));
        }
    }
    if let Some(first) = ds.samples.first() {
        let side = first.image.shape()[1];
        match cfg.crop {
            Some(c) if side < c => {
                return Err(Error::Config(format!(
                    "images are {side} px per side, too small for a {c} px crop"
                )));
            }
            None if side != block.resolution => {
                return Err(Error::Config(format!(
                    "images are {side} px per side but the network expects {}; \
                     configure a crop or regenerate the data",
                    block.resolution
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

fn step_store(store: &mut ParamStore, tape: &Tape, opt: Optimizer, lr: f64) -> Result<()> {
    store.clear_grads();
    store.collect_grads(tape)?;
    store.optimizer_step(opt, lr)
}

fn au_targets(batch: &crate::data::CollatedBatch, what: &str) -> Result<Vec<AuTarget>> {
    batch
        .au
        .iter()
        .cloned()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Train(format!("{what} batch lacks action-unit labels")))
}

// ── Stage 1 ────────────────────────────────────────────────────────────

/// Mean over samples of the mean per-coordinate absolute error divided by
/// the sample's inter-ocular distance, from the standalone branch.
pub fn branch_validation_error(
    block: &BlockConfig,
    branch: &ParamStore,
    ds: &Dataset,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Train("validation needs at least one sample".into()));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let cb = ds.collate_center(chunk, block.resolution)?;
        let mut tape = Tape::new();
        let img = tape.constant(&cb.images)?;
        let pred = landmark_branch_forward(block, &mut tape, branch, img, Lease::Frozen)?;
        let pv = tape.value(pred);
        let m = pv.shape()[1];
        for (i, t) in cb.landmarks.iter().enumerate() {
            let row = &pv.data()[i * m..(i + 1) * m];
            let mean_abs: f64 =
                row.iter().zip(&t.coords).map(|(p, c)| (p - c).abs()).sum::<f64>() / m as f64;
            total += mean_abs / t.d;
        }
    }
    Ok(total / idx.len() as f64)
}

fn stage1_step(
    block: &BlockConfig,
    branch: &mut ParamStore,
    batch: &crate::data::CollatedBatch,
    opt: Optimizer,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let img = tape.constant(&batch.images)?;
    let pred = landmark_branch_forward(block, &mut tape, branch, img, Lease::Train)?;
    let loss = landmark_loss(&mut tape, pred, &batch.landmarks)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    step_store(branch, &tape, opt, lr)?;
    Ok(value)
}

/// Pretrain the standalone landmark branch on source-domain samples against
/// the landmark loss alone. Returns the state of the epoch with the lowest
/// validation error, validated on `val` when given and on the training
/// source samples otherwise. Zero epochs return the initialization.
pub fn pretrain_landmark_branch(
    block: &BlockConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    block.validate()?;
    check_input_size(block, cfg, data)?;
    if let Some(v) = val {
        check_input_size(block, cfg, v)?;
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut branch = init_landmark_branch(block, &mut rng)?;
    let mut log = RunLog::new();
    if cfg.stage1.epochs == 0 {
        log.push_note("stage 1 skipped: zero epochs configured");
        return Ok(PretrainOutcome {
            branch,
            log,
            best_epoch: None,
            best_error: None,
            aborted: None,
        });
    }
    if data.source_idx.is_empty() {
        return Err(Error::Train("stage 1 needs source-domain samples".into()));
    }

    let init_state = branch.duplicate();
    let opt = Optimizer::adam();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step: u64 = 0;

    let validate = |branch: &ParamStore| -> Result<f64> {
        match val {
            Some(v) => {
                let all: Vec<usize> = (0..v.samples.len()).collect();
                branch_validation_error(block, branch, v, &all, cfg.val_batch)
            }
            None => branch_validation_error(block, branch, data, &data.source_idx, cfg.val_batch),
        }
    };

    'epochs: for epoch in 0..cfg.stage1.epochs {
        let mut order = data.source_idx.clone();
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x517a_6e01);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let chunk_len = cfg.stage1.batch.min(order.len());
        let mut capped = false;

        for (b, chunk) in order.chunks_exact(chunk_len).enumerate() {
            if cfg.stage1.max_steps.is_some_and(|m| step >= m) {
                capped = true;
                break;
            }
            let cb = match cfg.crop {
                Some(c) => data.collate_augmented(chunk, c, stage1_aug_seed(cfg.seed, epoch, b))?,
                None => data.collate(chunk)?,
            };
            match stage1_step(block, &mut branch, &cb, opt, cfg.stage1.lr) {
                Ok(loss) => {
                    step += 1;
                    log.push_step(StepRecord {
                        step,
                        stage: "pretrain".to_string(),
                        epoch: epoch + 1,
                        lr: cfg.stage1.lr,
                        losses: BTreeMap::from([("fl".to_string(), loss)]),
                        scores: None,
                    })?;
                }
                Err(e) => {
                    let diag = format!("stage 1 aborted at step {}: {e}", step + 1);
                    log.push_note(diag.clone());
                    let (best_epoch, best_error, restored) = match best {
                        Some((ep, err, state)) => (Some(ep), Some(err), state),
                        None => (None, None, init_state),
                    };
                    return Ok(PretrainOutcome {
                        branch: restored,
                        log,
                        best_epoch,
                        best_error,
                        aborted: Some(diag),
                    });
                }
            }
        }

        let verr = validate(&branch)?;
        log.push_validation(epoch + 1, "pretrain", "landmark_error", verr)?;
        if best.as_ref().is_none_or(|(_, b, _)| verr < *b) {
            best = Some((epoch + 1, verr, branch.duplicate()));
        }
        if capped {
            log.push_note(format!("stage 1 stopped at the {step}-step cap"));
            break 'epochs;
        }
    }

    let (best_epoch, best_error, best_state) = best.expect("at least one epoch ran");
    Ok(PretrainOutcome {
        branch: best_state,
        log,
        best_epoch: Some(best_epoch),
        best_error: Some(best_error),
        aborted: None,
    })
}

fn stage1_aug_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((batch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

// ── Stage 2 ────────────────────────────────────────────────────────────

/// Drives individual stage-2 updates. [`train_main`] uses it internally;
/// it is public so tests and tools can step the minimax alternation by
/// hand under custom schedules.
pub struct Stage2Stepper<'a> {
    block: BlockConfig,
    cfg: &'a TrainConfig,
    pairs: [bool; 6],
    mean_face: LandmarkTarget,
    opt: Optimizer,
}

impl<'a> Stage2Stepper<'a> {
    /// The canonical mean face comes from the training manifest's source
    /// statistics; block dimensions are adjusted for the ablation flags.
    pub fn new(block: &BlockConfig, cfg: &'a TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.derive_block(block);
        block.validate()?;
        check_input_size(&block, cfg, data)?;
        Ok(Stage2Stepper {
            block,
            cfg,
            pairs: cfg.enabled_pairs(),
            mean_face: data.manifest.mean_face_target()?,
            opt: Optimizer::adam(),
        })
    }

    /// Block dimensions after ablation adjustments; build the
    /// [`NetworkSet`] to train from these.
    pub fn block(&self) -> &BlockConfig {
        &self.block
    }

    /// One discriminator update: both discriminators learn from detached
    /// features, weighted by the same lambdas the total objective uses.
    /// D_l trains on the cooperative landmark-feature term plus its
    /// adversarial member; D_d on its adversarial member. No generator
    /// parameter moves.
    pub fn disc_update(
        &self,
        set: &mut NetworkSet,
        pb: &PairedBatch,
        lr: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let mut tape = Tape::new();
        let bundle = set.full_graph_forward(&mut tape, &pb.source.images, &pb.target.images)?;
        let det_sl = tape.detach(bundle.f_sl);
        let det_tl = tape.detach(bundle.f_tl);
        let l_l = landmark_feature_loss(
            &mut tape,
            &set.landmark_disc,
            det_sl,
            det_tl,
            &pb.source.landmarks,
            &pb.target.landmarks,
            Lease::Train,
        )?;
        let adl = adversarial_landmark_losses(
            &mut tape,
            &set.landmark_disc,
            bundle.f_sb,
            bundle.f_tb,
            &pb.source.landmarks,
            &pb.target.landmarks,
            Some(&self.mean_face),
        )?;
        let adf = adversarial_domain_losses(
            &mut tape,
            &set.domain_disc,
            bundle.f_s,
            bundle.f_t,
            bundle.f_sltb,
            bundle.f_sbtl,
        )?;
        let parts = LossComponents {
            l: Some(l_l),
            adl: Some(adl.d_step),
            adf: Some(adf.d_step),
            ..Default::default()
        };
        let total = total_loss(&mut tape, &self.cfg.weights, &parts)?;
        let mut losses: BTreeMap<String, f64> = parts
            .values(&tape)
            .into_iter()
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        losses.insert("total".to_string(), tape.value(total).item()?);
        tape.backward(total)?;
        step_store(&mut set.landmark_disc, &tape, self.opt, lr)?;
        step_store(&mut set.domain_disc, &tape, self.opt, lr)?;
        Ok(losses)
    }

    /// One generator update: the combined objective over live features with
    /// both discriminators frozen. Steps every module that contributed to
    /// the graph except the discriminators.
    pub fn gen_update(
        &self,
        set: &mut NetworkSet,
        pb: &PairedBatch,
        lr: f64,
    ) -> Result<(BTreeMap<String, f64>, DiscScores)> {
        let mut tape = Tape::new();
        let bundle = set.full_graph_forward(&mut tape, &pb.source.images, &pb.target.images)?;
        let l_c =
            contrastive_alignment_loss(&self.block, &mut tape, set, &bundle, &self.pairs, Lease::Train)?;
        let l_l = landmark_feature_loss(
            &mut tape,
            &set.landmark_disc,
            bundle.f_sl,
            bundle.f_tl,
            &pb.source.landmarks,
            &pb.target.landmarks,
            Lease::Frozen,
        )?;
        let adl = adversarial_landmark_losses(
            &mut tape,
            &set.landmark_disc,
            bundle.f_sb,
            bundle.f_tb,
            &pb.source.landmarks,
            &pb.target.landmarks,
            Some(&self.mean_face),
        )?;
        let adf = adversarial_domain_losses(
            &mut tape,
            &set.domain_disc,
            bundle.f_s,
            bundle.f_t,
            bundle.f_sltb,
            bundle.f_sbtl,
        )?;

        // The AU objective reads both the genuine source features and the
        // source-landmark reconstruction, against the same source labels.
        let src_au = au_targets(&pb.source, "source")?;
        let p_s = au_head_forward(&mut tape, &set.au_head, bundle.f_s, Lease::Train)?;
        let au_s = au_loss(&mut tape, p_s, &src_au)?;
        let p_r = au_head_forward(&mut tape, &set.au_head, bundle.f_sltb, Lease::Train)?;
        let au_r = au_loss(&mut tape, p_r, &src_au)?;
        let l_au = tape.add(au_s, au_r)?;

        let l_fl = if self.cfg.enable_ml {
            let c_s =
                landmark_tail_forward(&self.block, &mut tape, &set.landmark_tail, bundle.f_s, Lease::Train)?;
            let e_s = landmark_loss(&mut tape, c_s, &pb.source.landmarks)?;
            let c_t =
                landmark_tail_forward(&self.block, &mut tape, &set.landmark_tail, bundle.f_t, Lease::Train)?;
            let e_t = landmark_loss(&mut tape, c_t, &pb.target.landmarks)?;
            Some(tape.add(e_s, e_t)?)
        } else {
            None
        };

        let parts = LossComponents {
            c: Some(l_c),
            l: Some(l_l),
            adl: Some(adl.g_step),
            adf: Some(adf.g_step),
            au: Some(l_au),
            fl: l_fl,
        };
        let total = total_loss(&mut tape, &self.cfg.weights, &parts)?;
        let mut losses: BTreeMap<String, f64> = parts
            .values(&tape)
            .into_iter()
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        losses.insert("total".to_string(), tape.value(total).item()?);

        let mut mean_score = |feat| -> Result<f64> {
            let s = d_domain_forward(&mut tape, &set.domain_disc, feat, Lease::Frozen)?;
            let m = tape.mean(s)?;
            tape.value(m).item()
        };
        let r_sltb = mean_score(bundle.f_sltb)?;
        let r_sbtl = mean_score(bundle.f_sbtl)?;
        let real_source = mean_score(bundle.f_s)?;
        let real_target = mean_score(bundle.f_t)?;
        let scores = DiscScores {
            recon_mean: 0.5 * (r_sltb + r_sbtl),
            real_source,
            real_target,
        };

        tape.backward(total)?;
        step_store(&mut set.extractor, &tape, self.opt, lr)?;
        step_store(&mut set.landmark_encoder, &tape, self.opt, lr)?;
        step_store(&mut set.background_generator, &tape, self.opt, lr)?;
        step_store(&mut set.reconstructor, &tape, self.opt, lr)?;
        step_store(&mut set.au_head, &tape, self.opt, lr)?;
        if self.cfg.enable_ml {
            step_store(&mut set.landmark_tail, &tape, self.opt, lr)?;
        }
        if !self.block.identity_projectors {
            for (i, &enabled) in self.pairs.iter().enumerate() {
                if !enabled {
                    continue;
                }
                for side in 1..=2 {
                    step_store(set.projector_mut(i + 1, side)?, &tape, self.opt, lr)?;
                }
            }
        }
        Ok((losses, scores))
    }

    /// Run one epoch of alternating updates over every paired batch.
    fn run_epoch(
        &self,
        set: &mut NetworkSet,
        data: &Dataset,
        epoch_seed: u64,
        epoch_label: usize,
        lr: f64,
        step: &mut u64,
        log: &mut RunLog,
        stage_prefix: &str,
    ) -> Result<()> {
        let batches = paired_batches(
            data,
            self.cfg.stage2.batch,
            self.cfg.seed,
            epoch_seed,
            self.cfg.crop,
        )?;
        if batches.is_empty() {
            return Err(Error::Train(format!(
                "no full paired batches: {} source samples at batch size {}",
                data.source_idx.len(),
                self.cfg.stage2.batch
            )));
        }
        for pb in &batches {
            for _ in 0..self.cfg.stage2.disc_steps {
                let losses = self.disc_update(set, pb, lr)?;
                *step += 1;
                log.push_step(StepRecord {
                    step: *step,
                    stage: format!("{stage_prefix}disc"),
                    epoch: epoch_label,
                    lr,
                    losses,
                    scores: None,
                })?;
            }
            let (losses, scores) = self.gen_update(set, pb, lr)?;
            *step += 1;
            log.push_step(StepRecord {
                step: *step,
                stage: format!("{stage_prefix}gen"),
                epoch: epoch_label,
                lr,
                losses,
                scores: Some(scores),
            })?;
        }
        Ok(())
    }
}

/// Stage 2: joint adversarial training of the full network set over paired
/// two-domain batches. With `enable_ml` the pretrained branch seeds the
/// extractor and landmark tail and the landmark task keeps training through
/// the feature-landmark loss; without it the extractor starts random and
/// that term is dropped. Every epoch ends with a snapshot, validated when
/// `val` is given.
pub fn train_main(
    block: &BlockConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    pretrained: Option<&ParamStore>,
) -> Result<TrainOutcome> {
    if cfg.enable_ml && pretrained.is_none() {
        return Err(Error::Train(
            "multi-task transfer needs a pretrained landmark branch".into(),
        ));
    }
    let stepper = Stage2Stepper::new(block, cfg, data)?;
    let block = stepper.block().clone();

    let mut set = NetworkSet::new(block.clone(), cfg.seed)?;
    let mut log = RunLog::new();
    if let Some(branch) = pretrained.filter(|_| cfg.enable_ml) {
        let n_extract = transfer_init(&mut set.extractor, branch)?;
        let n_tail = transfer_init(&mut set.landmark_tail, branch)?;
        log.push_note(format!(
            "transferred {} pretrained tensors into the extractor and landmark tail",
            n_extract + n_tail
        ));
    }

    let mut epochs_out: Vec<EpochCheckpoint> = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.stage2.epochs {
        let lr = lr_for_epoch(
            cfg.stage2.lr,
            epoch,
            cfg.stage2.epochs,
            cfg.stage2.lr_table.as_deref(),
        )?;
        if let Err(e) = stepper.run_epoch(
            &mut set,
            data,
            epoch as u64,
            epoch + 1,
            lr,
            &mut step,
            &mut log,
            "",
        ) {
            let diag = format!("stage 2 aborted at step {}: {e}", step + 1);
            log.push_note(diag.clone());
            let restored = match epochs_out.last() {
                Some(cp) => cp.set.snapshot(),
                None => NetworkSet::new(block.clone(), cfg.seed)?,
            };
            return Ok(TrainOutcome {
                set: restored,
                log,
                epochs: epochs_out,
                aborted: Some(diag),
            });
        }

        let val_mean_f1 = match val {
            Some(v) => {
                let eval = evaluate_au(&block, &set, v, cfg.threshold, cfg.val_batch)?;
                let f1 = eval.selection_f1();
                log.push_validation(epoch + 1, "train", "mean_f1", f1)?;
                Some(f1)
            }
            None => None,
        };
        epochs_out.push(EpochCheckpoint { epoch: epoch + 1, set: set.snapshot(), val_mean_f1 });
    }

    Ok(TrainOutcome { set, log, epochs: epochs_out, aborted: None })
}

// ── Selection and fine-tuning ──────────────────────────────────────────

/// Pick the epoch checkpoint with the highest validation mean F1 (ties go
/// to the earlier epoch), then fine-tune it at the reduced learning rate
/// for the configured budget. Returns whichever of the selected and
/// fine-tuned states validates higher, the selected one on ties, along
/// with the fine-tuning history.
pub fn select_and_finetune(
    block: &BlockConfig,
    cfg: &TrainConfig,
    checkpoints: &[EpochCheckpoint],
    data: &Dataset,
    val: &Dataset,
) -> Result<(NetworkSet, RunLog)> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::Train("no checkpoints to select from".into()));
    }
    let mut best: Option<(&EpochCheckpoint, f64)> = None;
    for cp in checkpoints {
        let f1 = cp.val_mean_f1.ok_or_else(|| {
            Error::Train(format!("checkpoint for epoch {} has no validation metric", cp.epoch))
        })?;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((cp, f1));
        }
    }
    let (selected, selected_f1) = best.expect("non-empty checkpoint list");
    let mut log = RunLog::new();
    log.push_note(format!(
        "selected epoch {} at mean F1 {selected_f1:.6}",
        selected.epoch
    ));
    if cfg.finetune.epochs == 0 {
        return Ok((selected.set.snapshot(), log));
    }

    let mut tuned = selected.set.snapshot();
    let stepper = Stage2Stepper::new(block, cfg, data)?;
    let lr = cfg.stage2.lr * cfg.finetune.lr_multiplier;
    let mut step: u64 = 0;
    for epoch in 0..cfg.finetune.epochs {
        // Batch shuffles continue past the stage-2 epoch streams.
        let epoch_seed = (cfg.stage2.epochs + epoch) as u64;
        if let Err(e) = stepper.run_epoch(
            &mut tuned,
            data,
            epoch_seed,
            epoch + 1,
            lr,
            &mut step,
            &mut log,
            "finetune_",
        ) {
            log.push_note(format!(
                "fine-tuning aborted at step {}: {e}; keeping the selected checkpoint",
                step + 1
            ));
            return Ok((selected.set.snapshot(), log));
        }
    }

    let tuned_eval = evaluate_au(stepper.block(), &tuned, val, cfg.threshold, cfg.val_batch)?;
    let tuned_f1 = tuned_eval.selection_f1();
    log.push_validation(cfg.finetune.epochs, "finetune", "mean_f1", tuned_f1)?;
    if tuned_f1 > selected_f1 {
        Ok((tuned, log))
    } else {
        log.push_note("fine-tuning did not improve validation; keeping the selected checkpoint");
        Ok((selected.set.snapshot(), log))
    }
}

// ── Evaluation forwards ────────────────────────────────────────────────

/// Score every sample through the extractor and AU head and tally
/// confusion counts, overall and per domain. Every sample needs labels.
pub fn evaluate_au(
    block: &BlockConfig,
    set: &NetworkSet,
    ds: &Dataset,
    threshold: f64,
    batch: usize,
) -> Result<AuEvaluation> {
    if ds.samples.is_empty() {
        return Err(Error::Eval("evaluation needs at least one sample".into()));
    }
    let n_au = block.n_au;
    let mut overall = ConfusionCounts::new(n_au)?;
    let mut source: Option<ConfusionCounts> = None;
    let mut target: Option<ConfusionCounts> = None;
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let cb = ds.collate_center(chunk, block.resolution)?;
        let mut tape = Tape::new();
        let img = tape.constant(&cb.images)?;
        let feat = extractor_forward(block, &mut tape, &set.extractor, img, Lease::Frozen)?;
        let probs = au_head_forward(&mut tape, &set.au_head, feat, Lease::Frozen)?;
        let pv = tape.value(probs);
        for (i, &sample_idx) in chunk.iter().enumerate() {
            let sample = &ds.samples[sample_idx];
            let labels = sample.au_labels.as_ref().ok_or_else(|| {
                Error::Eval(format!("sample {sample_idx} has no action-unit labels"))
            })?;
            let row = &pv.data()[i * n_au..(i + 1) * n_au];
            overall.update(row, labels, threshold)?;
            let slot = match sample.domain {
                crate::data::Domain::Source => &mut source,
                crate::data::Domain::Target => &mut target,
            };
            slot.get_or_insert(ConfusionCounts::new(n_au)?).update(row, labels, threshold)?;
        }
    }
    Ok(AuEvaluation { overall, source, target })
}

/// Landmark error of the stage-2 tail on extracted features, same metric
/// as [`branch_validation_error`].
pub fn tail_validation_error(
    block: &BlockConfig,
    set: &NetworkSet,
    ds: &Dataset,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Train("validation needs at least one sample".into()));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let cb = ds.collate_center(chunk, block.resolution)?;
        let mut tape = Tape::new();
        let img = tape.constant(&cb.images)?;
        let feat = extractor_forward(block, &mut tape, &set.extractor, img, Lease::Frozen)?;
        let pred = landmark_tail_forward(block, &mut tape, &set.landmark_tail, feat, Lease::Frozen)?;
        let pv = tape.value(pred);
        let m = pv.shape()[1];
        for (i, t) in cb.landmarks.iter().enumerate() {
            let row = &pv.data()[i * m..(i + 1) * m];
            let mean_abs: f64 =
                row.iter().zip(&t.coords).map(|(p, c)| (p - c).abs()).sum::<f64>() / m as f64;
            total += mean_abs / t.d;
        }
    }
    Ok(total / idx.len() as f64)
}
