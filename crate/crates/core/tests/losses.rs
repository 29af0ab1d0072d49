//! Frozen-value and property tests for every loss term.
//!
//! Hand values were worked out independently from the formulas and are
//! asserted as constants, so a regression in any term trips a concrete
//! number rather than a self-consistent recomputation.

use ausep_core::autodiff::{
    grad_check, grad_check_model, GradCheckOptions, ParamStore, Tape, Tensor, TensorId,
};
use ausep_core::losses::{
    adversarial_domain_losses, adversarial_landmark_losses, alignment_loss_pairs, au_loss,
    class_weights_from_rates, contrastive_alignment_loss, landmark_feature_loss, landmark_loss,
    total_loss, weighted_total, AuTarget, LandmarkTarget, LossComponents, LossWeights,
};
use ausep_core::nets::{
    d_domain_forward, d_landmark_forward, init_domain_disc, init_landmark_disc, BlockConfig,
    Lease, NetworkSet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn small_cfg() -> BlockConfig {
    BlockConfig {
        in_channels: 1,
        widths: [2, 2, 2, 2, 2],
        cbam_reduction: 2,
        n_land: 3,
        n_au: 2,
        resolution: 32,
        fc_hidden: 4,
        disc_hidden: 3,
        identity_projectors: false,
    }
}

fn scalar(tape: &Tape, id: TensorId) -> f64 {
    tape.value(id).item().unwrap()
}

fn feature(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

fn targets3(n: usize, seed: u64) -> Vec<LandmarkTarget> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let coords = Tensor::uniform(&[6], 0.5, &mut rng).data().to_vec();
            LandmarkTarget::new(coords, 0.8).unwrap()
        })
        .collect()
}

// ── Landmark loss ───────────────────────────────────────────────────────

#[test]
fn landmark_loss_zero_at_exact_prediction() {
    let mut tape = Tape::new();
    let coords = vec![0.2, 0.9, -0.4, 0.1];
    let pred = tape.constant(&Tensor::new(vec![1, 4], coords.clone()).unwrap()).unwrap();
    let t = LandmarkTarget::new(coords, 0.5).unwrap();
    let loss = landmark_loss(&mut tape, pred, &[t]).unwrap();
    assert_eq!(scalar(&tape, loss), 0.0);
}

#[test]
fn landmark_loss_hand_value() {
    // One landmark, unit inter-ocular distance, coordinate error (0.3, 0.4):
    // (0.09 + 0.16) / 2 = 0.125.
    let mut tape = Tape::new();
    let pred = tape.constant(&Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap()).unwrap();
    let t = LandmarkTarget::new(vec![0.0, 0.0], 1.0).unwrap();
    let loss = landmark_loss(&mut tape, pred, &[t]).unwrap();
    assert!((scalar(&tape, loss) - 0.125).abs() < 1e-15);
}

#[test]
fn landmark_loss_quarter_law() {
    let mut tape = Tape::new();
    let pred = tape.constant(&Tensor::new(vec![1, 6], vec![0.4; 6]).unwrap()).unwrap();
    let coords = vec![0.1, 0.3, 0.0, 0.7, 0.2, 0.2];
    let near = LandmarkTarget::new(coords.clone(), 0.35).unwrap();
    let far = LandmarkTarget::new(coords, 0.7).unwrap();
    let l_near = landmark_loss(&mut tape, pred, &[near]).unwrap();
    let l_far = landmark_loss(&mut tape, pred, &[far]).unwrap();
    let ratio = scalar(&tape, l_near) / scalar(&tape, l_far);
    assert!((ratio - 4.0).abs() < 1e-12, "ratio {ratio}");
}

#[test]
fn landmark_loss_batch_mean_of_per_sample_values() {
    let mut tape = Tape::new();
    let rows = vec![0.3, 0.4, 0.1, 0.2];
    let pred2 = tape.constant(&Tensor::new(vec![2, 2], rows.clone()).unwrap()).unwrap();
    let t1 = LandmarkTarget::new(vec![0.0, 0.0], 1.0).unwrap();
    let t2 = LandmarkTarget::new(vec![0.0, 0.0], 0.5).unwrap();
    let batched = landmark_loss(&mut tape, pred2, &[t1.clone(), t2.clone()]).unwrap();

    let p1 = tape.constant(&Tensor::new(vec![1, 2], rows[..2].to_vec()).unwrap()).unwrap();
    let p2 = tape.constant(&Tensor::new(vec![1, 2], rows[2..].to_vec()).unwrap()).unwrap();
    let l1 = landmark_loss(&mut tape, p1, &[t1]).unwrap();
    let l2 = landmark_loss(&mut tape, p2, &[t2]).unwrap();
    let expect = 0.5 * (scalar(&tape, l1) + scalar(&tape, l2));
    assert!((scalar(&tape, batched) - expect).abs() < 1e-15);
}

#[test]
fn landmark_loss_rejects_bad_targets() {
    let mut tape = Tape::new();
    let pred = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
    assert!(LandmarkTarget::new(vec![0.0, 0.0], 0.0).is_err());
    assert!(LandmarkTarget::new(vec![0.0, 0.0], -1.0).is_err());
    assert!(LandmarkTarget::new(vec![0.0, f64::NAN], 1.0).is_err());
    assert!(LandmarkTarget::new(vec![0.0], 1.0).is_err());
    // Length mismatch against predictions is also rejected.
    let t = LandmarkTarget::new(vec![0.0, 0.0, 0.0, 0.0], 1.0).unwrap();
    assert!(landmark_loss(&mut tape, pred, &[t]).is_err());
}

#[test]
fn landmark_loss_matches_finite_differences() {
    let mut store = ParamStore::new();
    store.insert("pred", feature(11, &[2, 6])).unwrap();
    let targets = targets3(2, 12);
    let report = grad_check(
        &mut store,
        |s, tape| {
            let pred = tape.param(s, "pred")?;
            landmark_loss(tape, pred, &targets)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());
}

// ── Alignment loss ──────────────────────────────────────────────────────

#[test]
fn alignment_hand_value_single_pair() {
    // One enabled pair, 1 channel, 2x2 features, reconstruction offset by
    // +0.5 everywhere, identity projectors: 4 * 0.5 / (2*2) = 0.5.
    let cfg = BlockConfig { identity_projectors: true, ..small_cfg() };
    let set = NetworkSet::new(cfg.clone(), 7).unwrap();
    let mut tape = Tape::new();
    let orig = tape.constant(&Tensor::filled(&[1, 1, 2, 2], 0.25)).unwrap();
    let recon = tape.constant(&Tensor::filled(&[1, 1, 2, 2], 0.75)).unwrap();
    let mut pairs = [None; 6];
    pairs[0] = Some((recon, orig));
    let mut enabled = [false; 6];
    enabled[0] = true;
    let loss =
        alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &enabled, Lease::Frozen).unwrap();
    assert!((scalar(&tape, loss) - 0.5).abs() < 1e-15);
}

#[test]
fn alignment_zero_when_reconstruction_is_exact() {
    let cfg = BlockConfig { identity_projectors: true, ..small_cfg() };
    let set = NetworkSet::new(cfg.clone(), 8).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(&feature(21, &[2, 2, 3, 3])).unwrap();
    let pairs = [Some((f, f)); 6];
    let loss =
        alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &[true; 6], Lease::Frozen).unwrap();
    assert_eq!(scalar(&tape, loss), 0.0);
}

#[test]
fn alignment_six_pair_additivity() {
    // The full loss equals the sum of six independently evaluated
    // single-pair losses, with real (non-identity) projectors.
    let cfg = small_cfg();
    let set = NetworkSet::new(cfg.clone(), 9).unwrap();
    let mut tape = Tape::new();
    let mut pairs = [None; 6];
    for (i, slot) in pairs.iter_mut().enumerate() {
        let a = tape.constant(&feature(100 + i as u64, &[2, 2, 2, 2])).unwrap();
        let b = tape.constant(&feature(200 + i as u64, &[2, 2, 2, 2])).unwrap();
        *slot = Some((a, b));
    }
    let full =
        alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &[true; 6], Lease::Frozen).unwrap();
    let mut sum = 0.0;
    for i in 0..6 {
        let mut enabled = [false; 6];
        enabled[i] = true;
        let single =
            alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &enabled, Lease::Frozen).unwrap();
        sum += scalar(&tape, single);
    }
    assert!((scalar(&tape, full) - sum).abs() < 1e-12);
}

#[test]
fn alignment_mask_keeps_whole_feature_pairs_only() {
    let cfg = small_cfg();
    let set = NetworkSet::new(cfg.clone(), 10).unwrap();
    let mut tape = Tape::new();
    let mut pairs = [None; 6];
    for (i, slot) in pairs.iter_mut().enumerate() {
        let a = tape.constant(&feature(300 + i as u64, &[1, 2, 2, 2])).unwrap();
        let b = tape.constant(&feature(400 + i as u64, &[1, 2, 2, 2])).unwrap();
        *slot = Some((a, b));
    }
    let masked = [true, true, false, false, false, false];
    let subset =
        alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &masked, Lease::Frozen).unwrap();
    let mut expect = 0.0;
    for i in 0..2 {
        let mut one = [false; 6];
        one[i] = true;
        let single =
            alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &one, Lease::Frozen).unwrap();
        expect += scalar(&tape, single);
    }
    assert!((scalar(&tape, subset) - expect).abs() < 1e-15);
}

#[test]
fn alignment_missing_pair_is_named() {
    let cfg = small_cfg();
    let set = NetworkSet::new(cfg.clone(), 11).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(&feature(31, &[1, 2, 2, 2])).unwrap();
    let mut pairs = [Some((f, f)); 6];
    pairs[2] = None;
    let err = alignment_loss_pairs(&cfg, &mut tape, &set, &pairs, &[true; 6], Lease::Frozen)
        .unwrap_err();
    assert!(err.to_string().contains("sl_r2/sl"), "{err}");
}

#[test]
fn alignment_from_bundle_all_pairs_nonnegative() {
    let cfg = small_cfg();
    let set = NetworkSet::new(cfg.clone(), 12).unwrap();
    let mut tape = Tape::new();
    let r = cfg.resolution;
    let i_s = feature(41, &[1, 1, r, r]);
    let i_t = feature(42, &[1, 1, r, r]);
    let bundle = set.full_graph_forward(&mut tape, &i_s, &i_t).unwrap();
    let loss =
        contrastive_alignment_loss(&cfg, &mut tape, &set, &bundle, &[true; 6], Lease::Train)
            .unwrap();
    assert!(scalar(&tape, loss) >= 0.0);
}

#[test]
fn alignment_matches_finite_differences() {
    struct Harness {
        set: NetworkSet,
        feats: ParamStore,
    }
    let cfg = small_cfg();
    let mut h = Harness { set: NetworkSet::new(cfg.clone(), 13).unwrap(), feats: ParamStore::new() };
    h.feats.insert("recon", feature(51, &[1, 2, 2, 2])).unwrap();
    h.feats.insert("orig", feature(52, &[1, 2, 2, 2])).unwrap();
    let report = grad_check_model(
        &mut h,
        &["feats", "projector_1_1", "projector_1_2"],
        |m, name| {
            if name == "feats" {
                &mut m.feats
            } else {
                m.set.store_mut(name).unwrap()
            }
        },
        |m, tape| {
            let recon = tape.param(&m.feats, "recon")?;
            let orig = tape.param(&m.feats, "orig")?;
            let mut pairs = [None; 6];
            pairs[0] = Some((recon, orig));
            let mut enabled = [false; 6];
            enabled[0] = true;
            alignment_loss_pairs(&m.set.cfg.clone(), tape, &m.set, &pairs, &enabled, Lease::Train)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());
}

// ── Action-unit loss ────────────────────────────────────────────────────

#[test]
fn au_loss_hand_value_ln2() {
    // One unit, unit weight, label 1, probability one half.
    let mut tape = Tape::new();
    let probs = tape.constant(&Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
    let t = AuTarget::new(vec![1.0], vec![1.0]).unwrap();
    let loss = au_loss(&mut tape, probs, &[t]).unwrap();
    assert!((scalar(&tape, loss) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn au_loss_confident_predictions_vanish() {
    let mut tape = Tape::new();
    let probs =
        tape.constant(&Tensor::new(vec![1, 3], vec![1.0 - 1e-7, 1e-7, 1.0 - 1e-7]).unwrap())
            .unwrap();
    let t = AuTarget::new(vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]).unwrap();
    let loss = au_loss(&mut tape, probs, &[t]).unwrap();
    assert!(scalar(&tape, loss).abs() < 1e-6);
}

#[test]
fn au_loss_uniform_weights_reduce_to_plain_cross_entropy() {
    let mut tape = Tape::new();
    let p = vec![0.3, 0.8, 0.6, 0.2, 0.9, 0.5];
    let y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let probs = tape.constant(&Tensor::new(vec![2, 3], p.clone()).unwrap()).unwrap();
    let ts: Vec<AuTarget> = (0..2)
        .map(|i| AuTarget::new(y[3 * i..3 * i + 3].to_vec(), vec![1.0; 3]).unwrap())
        .collect();
    let loss = au_loss(&mut tape, probs, &ts).unwrap();
    let mut hand = 0.0;
    for i in 0..6 {
        hand -= y[i] * p[i].ln() + (1.0 - y[i]) * (1.0 - p[i]).ln();
    }
    hand /= 6.0;
    assert!((scalar(&tape, loss) - hand).abs() < 1e-12);
}

#[test]
fn au_loss_is_finite_at_probability_extremes() {
    let mut tape = Tape::new();
    let probs = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    let t = AuTarget::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
    let loss = au_loss(&mut tape, probs, &[t]).unwrap();
    let v = scalar(&tape, loss);
    assert!(v.is_finite() && v > 0.0, "clamped extreme-probability loss {v}");
}

#[test]
fn au_loss_class_weighting_scales_per_unit_terms() {
    // With label 1 and probability one half in both units, the loss is the
    // weight average times ln 2.
    let mut tape = Tape::new();
    let probs = tape.constant(&Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
    let t = AuTarget::new(vec![1.0, 1.0], vec![1.5, 0.5]).unwrap();
    let loss = au_loss(&mut tape, probs, &[t]).unwrap();
    assert!((scalar(&tape, loss) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn class_weights_follow_inverse_frequency() {
    // Rates 1/4 and 1/2: inverse rates 4 and 2, mean 3, weights 4/3, 2/3.
    let w = class_weights_from_rates(&[0.25, 0.5]).unwrap();
    assert!((w[0] - 4.0 / 3.0).abs() < 1e-15);
    assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
    let uniform = class_weights_from_rates(&[0.3, 0.3, 0.3]).unwrap();
    for v in uniform {
        assert!((v - 1.0).abs() < 1e-15);
    }
    assert!(class_weights_from_rates(&[0.0, 0.5]).is_err());
    assert!(class_weights_from_rates(&[1.0, 0.5]).is_err());
    assert!(class_weights_from_rates(&[]).is_err());
}

#[test]
fn au_loss_rejects_bad_targets() {
    let mut tape = Tape::new();
    let probs = tape.constant(&Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
    assert!(AuTarget::new(vec![0.5, 1.0], vec![1.0, 1.0]).is_err());
    assert!(AuTarget::new(vec![1.0, 1.0], vec![0.0, 1.0]).is_err());
    assert!(AuTarget::new(vec![1.0], vec![1.0, 1.0]).is_err());
    let t = AuTarget::new(vec![1.0], vec![1.0]).unwrap();
    assert!(au_loss(&mut tape, probs, &[t]).is_err());
}

#[test]
fn au_loss_matches_finite_differences() {
    let mut store = ParamStore::new();
    store.insert("logits", feature(61, &[2, 3])).unwrap();
    let ts: Vec<AuTarget> = vec![
        AuTarget::new(vec![1.0, 0.0, 1.0], vec![1.4, 0.8, 0.8]).unwrap(),
        AuTarget::new(vec![0.0, 0.0, 1.0], vec![1.4, 0.8, 0.8]).unwrap(),
    ];
    let report = grad_check(
        &mut store,
        |s, tape| {
            let logits = tape.param(s, "logits")?;
            let probs = tape.sigmoid(logits)?;
            au_loss(tape, probs, &ts)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());
}

// ── Cooperative landmark-feature loss ───────────────────────────────────

#[test]
fn landmark_feature_loss_is_sum_of_domain_terms() {
    let cfg = small_cfg();
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let disc = init_landmark_disc(&cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let f_sl = tape.constant(&feature(71, &[2, 2, 3, 3])).unwrap();
    let f_tl = tape.constant(&feature(72, &[2, 2, 3, 3])).unwrap();
    let src = targets3(2, 73);
    let tgt = targets3(2, 74);
    let joint =
        landmark_feature_loss(&mut tape, &disc, f_sl, f_tl, &src, &tgt, Lease::Frozen).unwrap();

    let p_s = d_landmark_forward(&mut tape, &disc, f_sl, Lease::Frozen).unwrap();
    let l_s = landmark_loss(&mut tape, p_s, &src).unwrap();
    let p_t = d_landmark_forward(&mut tape, &disc, f_tl, Lease::Frozen).unwrap();
    let l_t = landmark_loss(&mut tape, p_t, &tgt).unwrap();
    let expect = scalar(&tape, l_s) + scalar(&tape, l_t);
    assert!((scalar(&tape, joint) - expect).abs() < 1e-12);
}

#[test]
fn landmark_feature_loss_zero_when_discriminator_is_exact() {
    let cfg = small_cfg();
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let disc = init_landmark_disc(&cfg, &mut rng).unwrap();
    let f_sl = feature(81, &[1, 2, 3, 3]);
    let f_tl = feature(82, &[1, 2, 3, 3]);

    // Read what the discriminator actually predicts, then demand exactly that.
    let mut probe = Tape::new();
    let a = probe.constant(&f_sl).unwrap();
    let b = probe.constant(&f_tl).unwrap();
    let pa = d_landmark_forward(&mut probe, &disc, a, Lease::Frozen).unwrap();
    let pb = d_landmark_forward(&mut probe, &disc, b, Lease::Frozen).unwrap();
    let src = vec![LandmarkTarget::new(probe.value(pa).data().to_vec(), 1.0).unwrap()];
    let tgt = vec![LandmarkTarget::new(probe.value(pb).data().to_vec(), 1.0).unwrap()];

    let mut tape = Tape::new();
    let a = tape.constant(&f_sl).unwrap();
    let b = tape.constant(&f_tl).unwrap();
    let loss = landmark_feature_loss(&mut tape, &disc, a, b, &src, &tgt, Lease::Frozen).unwrap();
    assert_eq!(scalar(&tape, loss), 0.0);
}

#[test]
fn landmark_feature_loss_requires_pseudo_targets() {
    let cfg = small_cfg();
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let disc = init_landmark_disc(&cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(&feature(83, &[1, 2, 3, 3])).unwrap();
    let src = targets3(1, 84);
    let err = landmark_feature_loss(&mut tape, &disc, f, f, &src, &[], Lease::Frozen).unwrap_err();
    assert!(err.to_string().contains("pseudo"), "{err}");
}

// ── Adversarial landmark pair ───────────────────────────────────────────

struct AdlHarness {
    disc: ParamStore,
    gen: ParamStore,
}

fn adl_harness(seed: u64) -> AdlHarness {
    let cfg = small_cfg();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let disc = init_landmark_disc(&cfg, &mut rng).unwrap();
    let mut gen = ParamStore::new();
    gen.insert("f_sb", feature(seed + 1, &[1, 2, 3, 3])).unwrap();
    gen.insert("f_tb", feature(seed + 2, &[1, 2, 3, 3])).unwrap();
    AdlHarness { disc, gen }
}

fn mean_face3() -> LandmarkTarget {
    LandmarkTarget::new(vec![0.5, 0.45, 0.5, 0.55, 0.5, 0.65], 0.2).unwrap()
}

#[test]
fn adl_requires_mean_face() {
    let h = adl_harness(17);
    let mut tape = Tape::new();
    let f_sb = tape.param(&h.gen, "f_sb").unwrap();
    let f_tb = tape.param(&h.gen, "f_tb").unwrap();
    let src = targets3(1, 90);
    let tgt = targets3(1, 91);
    let err =
        adversarial_landmark_losses(&mut tape, &h.disc, f_sb, f_tb, &src, &tgt, None).unwrap_err();
    assert!(err.to_string().contains("mean face"), "{err}");
}

#[test]
fn adl_d_step_ignores_generator_parameters() {
    let h = adl_harness(18);
    let mut tape = Tape::new();
    let f_sb = tape.param(&h.gen, "f_sb").unwrap();
    let f_tb = tape.param(&h.gen, "f_tb").unwrap();
    let src = targets3(1, 92);
    let tgt = targets3(1, 93);
    let mf = mean_face3();
    let pair =
        adversarial_landmark_losses(&mut tape, &h.disc, f_sb, f_tb, &src, &tgt, Some(&mf))
            .unwrap();
    tape.backward(pair.d_step).unwrap();

    for (name, grad) in tape.param_grads(h.gen.uid()) {
        assert!(grad.iter().all(|&g| g == 0.0), "generator '{name}' received gradient");
    }
    let disc_total: f64 = tape
        .param_grads(h.disc.uid())
        .iter()
        .map(|(_, g)| g.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(disc_total > 0.0, "discriminator saw no gradient");
}

#[test]
fn adl_g_step_ignores_discriminator_parameters() {
    let h = adl_harness(19);
    let mut tape = Tape::new();
    let f_sb = tape.param(&h.gen, "f_sb").unwrap();
    let f_tb = tape.param(&h.gen, "f_tb").unwrap();
    let src = targets3(1, 94);
    let tgt = targets3(1, 95);
    let mf = mean_face3();
    let pair =
        adversarial_landmark_losses(&mut tape, &h.disc, f_sb, f_tb, &src, &tgt, Some(&mf))
            .unwrap();
    tape.backward(pair.g_step).unwrap();

    for (name, grad) in tape.param_grads(h.disc.uid()) {
        assert!(grad.iter().all(|&g| g == 0.0), "discriminator '{name}' received gradient");
    }
    let gen_total: f64 = tape
        .param_grads(h.gen.uid())
        .iter()
        .map(|(_, g)| g.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(gen_total > 0.0, "generator saw no gradient");
}

#[test]
fn adl_g_step_zero_at_mean_face_fixed_point() {
    // Identical background features give identical predictions; declaring
    // that prediction to be the canonical mean face zeroes the generator
    // member exactly.
    let h = adl_harness(20);
    let f = feature(96, &[1, 2, 3, 3]);

    let mut probe = Tape::new();
    let fid = probe.constant(&f).unwrap();
    let pred = d_landmark_forward(&mut probe, &h.disc, fid, Lease::Frozen).unwrap();
    let mf = LandmarkTarget::new(probe.value(pred).data().to_vec(), 1.0).unwrap();

    let mut tape = Tape::new();
    let fid = tape.constant(&f).unwrap();
    let src = targets3(1, 97);
    let tgt = targets3(1, 98);
    let pair =
        adversarial_landmark_losses(&mut tape, &h.disc, fid, fid, &src, &tgt, Some(&mf)).unwrap();
    assert_eq!(scalar(&tape, pair.g_step), 0.0);
    assert!(scalar(&tape, pair.d_step) > 0.0);
}

#[test]
fn adl_members_average_the_two_domains() {
    let h = adl_harness(22);
    let src = targets3(1, 99);
    let tgt = targets3(1, 100);
    let mf = mean_face3();

    let mut tape = Tape::new();
    let f_sb = tape.param(&h.gen, "f_sb").unwrap();
    let f_tb = tape.param(&h.gen, "f_tb").unwrap();
    let pair =
        adversarial_landmark_losses(&mut tape, &h.disc, f_sb, f_tb, &src, &tgt, Some(&mf))
            .unwrap();

    let p_s = d_landmark_forward(&mut tape, &h.disc, f_sb, Lease::Frozen).unwrap();
    let p_t = d_landmark_forward(&mut tape, &h.disc, f_tb, Lease::Frozen).unwrap();
    let d_s = landmark_loss(&mut tape, p_s, &src).unwrap();
    let d_t = landmark_loss(&mut tape, p_t, &tgt).unwrap();
    let g_s = landmark_loss(&mut tape, p_s, std::slice::from_ref(&mf)).unwrap();
    let g_t = landmark_loss(&mut tape, p_t, std::slice::from_ref(&mf)).unwrap();

    let d_expect = 0.5 * (scalar(&tape, d_s) + scalar(&tape, d_t));
    let g_expect = 0.5 * (scalar(&tape, g_s) + scalar(&tape, g_t));
    assert!((scalar(&tape, pair.d_step) - d_expect).abs() < 1e-12);
    assert!((scalar(&tape, pair.g_step) - g_expect).abs() < 1e-12);
}

#[test]
fn adl_members_match_finite_differences() {
    // Discriminator member against discriminator parameters, generator
    // member against the feature source.
    let mut h = adl_harness(23);
    let src = targets3(1, 101);
    let tgt = targets3(1, 102);
    let mf = mean_face3();

    let report = grad_check_model(
        &mut h,
        &["disc"],
        |m, _| &mut m.disc,
        |m, tape| {
            let f_sb = tape.param(&m.gen, "f_sb")?;
            let f_tb = tape.param(&m.gen, "f_tb")?;
            let pair =
                adversarial_landmark_losses(tape, &m.disc, f_sb, f_tb, &src, &tgt, Some(&mf))?;
            Ok(pair.d_step)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());

    let report = grad_check_model(
        &mut h,
        &["gen"],
        |m, _| &mut m.gen,
        |m, tape| {
            let f_sb = tape.param(&m.gen, "f_sb")?;
            let f_tb = tape.param(&m.gen, "f_tb")?;
            let pair =
                adversarial_landmark_losses(tape, &m.disc, f_sb, f_tb, &src, &tgt, Some(&mf))?;
            Ok(pair.g_step)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());
}

// ── Adversarial domain pair ─────────────────────────────────────────────

struct AdfHarness {
    disc: ParamStore,
    gen: ParamStore,
}

fn adf_harness(seed: u64) -> AdfHarness {
    let cfg = small_cfg();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let disc = init_domain_disc(&cfg, &mut rng).unwrap();
    let mut gen = ParamStore::new();
    for (i, name) in ["f_s", "f_t", "f_sltb", "f_sbtl"].iter().enumerate() {
        gen.insert(name, feature(seed + 10 + i as u64, &[1, 2, 3, 3])).unwrap();
    }
    AdfHarness { disc, gen }
}

#[test]
fn adf_hand_assembled_values() {
    let h = adf_harness(24);
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = ["f_s", "f_t", "f_sltb", "f_sbtl"]
        .iter()
        .map(|n| tape.param(&h.gen, n).unwrap())
        .collect();
    let pair =
        adversarial_domain_losses(&mut tape, &h.disc, ids[0], ids[1], ids[2], ids[3]).unwrap();

    let mut scores = Vec::new();
    for &id in &ids {
        let s = d_domain_forward(&mut tape, &h.disc, id, Lease::Frozen).unwrap();
        scores.push(tape.value(s).data()[0]);
    }
    let d_expect = (scores[0] - 1.0).powi(2)
        + scores[1].powi(2)
        + scores[2].powi(2)
        + (scores[3] - 1.0).powi(2);
    let g_expect = scores[2].powi(2) + (scores[3] - 1.0).powi(2);
    assert!((scalar(&tape, pair.d_step) - d_expect).abs() < 1e-12);
    assert!((scalar(&tape, pair.g_step) - g_expect).abs() < 1e-12);
}

#[test]
fn adf_d_step_ignores_generator_parameters() {
    let h = adf_harness(25);
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = ["f_s", "f_t", "f_sltb", "f_sbtl"]
        .iter()
        .map(|n| tape.param(&h.gen, n).unwrap())
        .collect();
    let pair =
        adversarial_domain_losses(&mut tape, &h.disc, ids[0], ids[1], ids[2], ids[3]).unwrap();
    tape.backward(pair.d_step).unwrap();
    for (name, grad) in tape.param_grads(h.gen.uid()) {
        assert!(grad.iter().all(|&g| g == 0.0), "generator '{name}' received gradient");
    }
    let disc_total: f64 = tape
        .param_grads(h.disc.uid())
        .iter()
        .map(|(_, g)| g.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(disc_total > 0.0);
}

#[test]
fn adf_g_step_ignores_discriminator_and_real_features() {
    let h = adf_harness(26);
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = ["f_s", "f_t", "f_sltb", "f_sbtl"]
        .iter()
        .map(|n| tape.param(&h.gen, n).unwrap())
        .collect();
    let pair =
        adversarial_domain_losses(&mut tape, &h.disc, ids[0], ids[1], ids[2], ids[3]).unwrap();
    tape.backward(pair.g_step).unwrap();
    for (name, grad) in tape.param_grads(h.disc.uid()) {
        assert!(grad.iter().all(|&g| g == 0.0), "discriminator '{name}' received gradient");
    }
    // Only the reconstructed features are on the generator member's path.
    for (name, grad) in tape.param_grads(h.gen.uid()) {
        let total: f64 = grad.iter().map(|v| v.abs()).sum();
        if name == "f_sltb" || name == "f_sbtl" {
            assert!(total > 0.0, "'{name}' should receive gradient");
        } else {
            assert!(total == 0.0, "real feature '{name}' should not receive gradient");
        }
    }
}

#[test]
fn adf_members_are_nonnegative_over_seeds() {
    for seed in 30..40 {
        let h = adf_harness(seed);
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ["f_s", "f_t", "f_sltb", "f_sbtl"]
            .iter()
            .map(|n| tape.param(&h.gen, n).unwrap())
            .collect();
        let pair =
            adversarial_domain_losses(&mut tape, &h.disc, ids[0], ids[1], ids[2], ids[3]).unwrap();
        assert!(scalar(&tape, pair.d_step) >= 0.0);
        assert!(scalar(&tape, pair.g_step) >= 0.0);
    }
}

#[test]
fn adf_members_match_finite_differences() {
    let mut h = adf_harness(27);
    let report = grad_check_model(
        &mut h,
        &["disc"],
        |m, _| &mut m.disc,
        |m, tape| {
            let ids: Vec<TensorId> = ["f_s", "f_t", "f_sltb", "f_sbtl"]
                .iter()
                .map(|n| tape.param(&m.gen, n))
                .collect::<Result<_, _>>()?;
            let pair = adversarial_domain_losses(tape, &m.disc, ids[0], ids[1], ids[2], ids[3])?;
            Ok(pair.d_step)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());

    let report = grad_check_model(
        &mut h,
        &["gen"],
        |m, _| &mut m.gen,
        |m, tape| {
            let ids: Vec<TensorId> = ["f_s", "f_t", "f_sltb", "f_sbtl"]
                .iter()
                .map(|n| tape.param(&m.gen, n))
                .collect::<Result<_, _>>()?;
            let pair = adversarial_domain_losses(tape, &m.disc, ids[0], ids[1], ids[2], ids[3])?;
            Ok(pair.g_step)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.format_table());
}

// ── Weighted total ──────────────────────────────────────────────────────

#[test]
fn total_hand_sum_with_default_weights() {
    let mut tape = Tape::new();
    let one = tape.constant_scalar(1.0).unwrap();
    let parts = LossComponents {
        c: Some(one),
        l: Some(one),
        adl: Some(one),
        adf: Some(one),
        au: Some(one),
        fl: Some(one),
    };
    let total = total_loss(&mut tape, &LossWeights::default(), &parts).unwrap();
    assert!((scalar(&tape, total) - 502.9).abs() < 1e-9);
}

#[test]
fn total_zero_weights_give_zero() {
    let mut tape = Tape::new();
    let v = tape.constant_scalar(3.7).unwrap();
    let parts = LossComponents { c: Some(v), au: Some(v), ..Default::default() };
    let weights = LossWeights { c: 0.0, l: 0.0, adl: 0.0, adf: 0.0, au: 0.0, fl: 0.0 };
    let total = total_loss(&mut tape, &weights, &parts).unwrap();
    assert_eq!(scalar(&tape, total), 0.0);
}

#[test]
fn total_absent_components_contribute_nothing() {
    let mut tape = Tape::new();
    let v = tape.constant_scalar(2.0).unwrap();
    let parts = LossComponents { adl: Some(v), ..Default::default() };
    let total = total_loss(&mut tape, &LossWeights::default(), &parts).unwrap();
    assert!((scalar(&tape, total) - 800.0).abs() < 1e-12);

    let empty = total_loss(&mut tape, &LossWeights::default(), &LossComponents::default()).unwrap();
    assert_eq!(scalar(&tape, empty), 0.0);
}

#[test]
fn total_rejects_non_scalar_components() {
    let mut tape = Tape::new();
    let v = tape.constant(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let parts = LossComponents { c: Some(v), ..Default::default() };
    let err = total_loss(&mut tape, &LossWeights::default(), &parts).unwrap_err();
    assert!(err.to_string().contains("'c'"), "{err}");
}

#[test]
fn total_gradient_is_linear_in_components() {
    // Backward of the weighted total must equal the weighted sum of each
    // component's own gradient, elementwise.
    let weights = LossWeights { c: 2.5, l: 0.3, adl: 7.0, adf: 1.2, au: 0.9, fl: 0.0, };
    let mut store = ParamStore::new();
    store.insert("p", feature(110, &[4])).unwrap();

    type Builder = fn(&mut Tape, TensorId) -> TensorId;
    let builders: [(&str, Builder); 3] = [
        ("c", |t, p| {
            let sq = t.mul(p, p).unwrap();
            t.sum(sq).unwrap()
        }),
        ("l", |t, p| t.sum(p).unwrap()),
        ("adl", |t, p| {
            let sq = t.mul(p, p).unwrap();
            let cu = t.mul(sq, p).unwrap();
            t.mean(cu).unwrap()
        }),
    ];

    let mut tape = Tape::new();
    let p = tape.param(&store, "p").unwrap();
    let mut parts = LossComponents::default();
    parts.c = Some(builders[0].1(&mut tape, p));
    parts.l = Some(builders[1].1(&mut tape, p));
    parts.adl = Some(builders[2].1(&mut tape, p));
    let total = total_loss(&mut tape, &weights, &parts).unwrap();
    tape.backward(total).unwrap();
    let combined = tape.param_grads(store.uid())[0].1.to_vec();

    let mut expect = vec![0.0; 4];
    for (name, build) in builders {
        let mut t = Tape::new();
        let p = t.param(&store, "p").unwrap();
        let loss = build(&mut t, p);
        t.backward(loss).unwrap();
        let g = t.param_grads(store.uid())[0].1.to_vec();
        let lambda = match name {
            "c" => weights.c,
            "l" => weights.l,
            _ => weights.adl,
        };
        for (e, gi) in expect.iter_mut().zip(g) {
            *e += lambda * gi;
        }
    }
    for (a, b) in combined.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10, "combined {a} vs expected {b}");
    }
}

#[test]
fn weights_default_values_and_validation() {
    let w = LossWeights::default();
    assert_eq!(
        [w.c, w.l, w.adl, w.adf, w.au, w.fl],
        [100.0, 0.6, 400.0, 1.2, 1.0, 0.1]
    );
    assert!(w.validate().is_ok());
    assert!(LossWeights { adl: -1.0, ..w }.validate().is_err());
    assert!(LossWeights { au: f64::NAN, ..w }.validate().is_err());

    let mut w = LossWeights::default();
    w.set("adf", 2.4).unwrap();
    assert_eq!(w.adf, 2.4);
    assert!(w.set("bogus", 1.0).is_err());
    assert!(w.set("c", -3.0).is_err());
}

#[test]
fn weighted_total_names_offending_component() {
    let w = LossWeights::default();
    let v = weighted_total(&w, &[("c", 1.0), ("au", 2.0)]).unwrap();
    assert!((v - 102.0).abs() < 1e-12);
    let err = weighted_total(&w, &[("c", 1.0), ("adl", f64::NAN)]).unwrap_err();
    assert!(err.to_string().contains("'adl'"), "{err}");
    assert!(weighted_total(&w, &[("mystery", 1.0)]).is_err());
}

// ── Cross-term properties ───────────────────────────────────────────────

#[test]
fn all_primary_terms_are_nonnegative_over_seeds() {
    for seed in 200..210 {
        let mut tape = Tape::new();
        let pred = tape.constant(&feature(seed, &[2, 6])).unwrap();
        let lt = targets3(2, seed + 1000);
        let ll = landmark_loss(&mut tape, pred, &lt).unwrap();
        assert!(scalar(&tape, ll) >= 0.0);

        let probs_raw = feature(seed + 2000, &[2, 2]);
        let squashed: Vec<f64> =
            probs_raw.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let probs = tape.constant(&Tensor::new(vec![2, 2], squashed).unwrap()).unwrap();
        let at: Vec<AuTarget> = (0..2)
            .map(|i| AuTarget::new(vec![(i % 2) as f64, 1.0], vec![0.5, 1.5]).unwrap())
            .collect();
        let al = au_loss(&mut tape, probs, &at).unwrap();
        assert!(scalar(&tape, al) >= 0.0);
    }
}
