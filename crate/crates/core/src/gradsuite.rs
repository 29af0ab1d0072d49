//! Named gradient checks over every network block and loss at small
//! shapes. The command-line gradcheck and the acceptance checks both run
//! this catalog, so a block added to the model belongs here too.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{
    grad_check, grad_check_model, GradCheckOptions, GradCheckReport, ParamStore, Tensor,
};
use crate::error::Result;
use crate::losses::{
    adversarial_domain_losses, adversarial_landmark_losses, alignment_loss_pairs, au_loss,
    landmark_feature_loss, landmark_loss, total_loss, AuTarget, LandmarkTarget, LossComponents,
    LossWeights,
};
use crate::nets::{
    au_head_forward, blocks::add_cbam_params, branch_parts_forward, cbam_forward,
    d_domain_forward, d_landmark_forward, extractor_forward, init_au_head, init_domain_disc,
    init_extractor, init_feature_stack, init_landmark_branch, init_landmark_disc,
    init_landmark_tail, landmark_branch_forward, landmark_tail_forward, reconstruct, separate,
    BlockConfig, Lease, NetworkSet,
};

/// One catalog entry: a stable name and its finite-difference report.
#[derive(Debug)]
pub struct SuiteItem {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// The smallest configuration the five-pool landmark chain accepts.
fn tiny_cfg() -> BlockConfig {
    BlockConfig {
        in_channels: 1,
        widths: [2, 3, 2, 2, 2],
        cbam_reduction: 2,
        n_land: 2,
        n_au: 2,
        resolution: 32,
        fc_hidden: 3,
        disc_hidden: 2,
        identity_projectors: false,
    }
}

fn land_targets(n: usize, n_land: usize) -> Vec<LandmarkTarget> {
    (0..n)
        .map(|i| {
            let coords = (0..2 * n_land)
                .map(|k| 0.3 + 0.05 * ((i + 7 * k) % 9) as f64)
                .collect();
            LandmarkTarget::new(coords, 0.4).expect("valid target")
        })
        .collect()
}

fn au_targets(n: usize, n_au: usize) -> Vec<AuTarget> {
    (0..n)
        .map(|i| {
            let labels = (0..n_au).map(|k| ((i + k) % 2) as f64).collect();
            AuTarget::new(labels, vec![1.0; n_au]).expect("valid target")
        })
        .collect()
}

/// Run every check at the given tolerance. Items come back in catalog
/// order regardless of pass or fail.
pub fn run_gradient_suite(tolerance: f64) -> Result<Vec<SuiteItem>> {
    let opts = GradCheckOptions { tolerance, ..GradCheckOptions::default() };
    let cfg = tiny_cfg();
    let fc = cfg.feature_channels();
    let fs = cfg.feature_size();
    let mut items = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(0x6A5D);

    // Convolutional parts 1..=5 of the landmark chain, without the head.
    {
        let mut store = init_landmark_branch(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[1, 1, 32, 32], 1.0, &mut rng))?;
        let cfg = cfg.clone();
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let f = branch_parts_forward(&cfg, tape, st, x, 5, Lease::Train)?;
                let sq = tape.mul(f, f)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "landmark_parts", report: r });
    }

    // CBAM attention alone on a 4x4 map.
    {
        let mut store = ParamStore::new();
        add_cbam_params(&mut store, "cbam", 3, 2, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let y = cbam_forward(tape, st, "cbam", x, Lease::Train)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "cbam", report: r });
    }

    // Full landmark branch through its regression head.
    {
        let mut store = init_landmark_branch(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, 1, 32, 32], 1.0, &mut rng))?;
        let cfg2 = cfg.clone();
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let pred = landmark_branch_forward(&cfg2, tape, st, x, Lease::Train)?;
                let sq = tape.mul(pred, pred)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "landmark_branch", report: r });
    }

    // Shared extractor: parts 1-2 at quarter resolution output.
    {
        let mut store = init_extractor(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[1, 1, 32, 32], 1.0, &mut rng))?;
        let cfg2 = cfg.clone();
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let f = extractor_forward(&cfg2, tape, st, x, Lease::Train)?;
                let sq = tape.mul(f, f)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "extractor", report: r });
    }

    // Landmark tail: parts 3-5 plus head, from extractor-shaped features.
    {
        let mut store = init_landmark_tail(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        let cfg2 = cfg.clone();
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let pred = landmark_tail_forward(&cfg2, tape, st, x, Lease::Train)?;
                let sq = tape.mul(pred, pred)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "landmark_tail", report: r });
    }

    // Both separation stacks through the separate() entry point.
    {
        struct Model {
            enc: ParamStore,
            gen: ParamStore,
            inputs: ParamStore,
        }
        let mut model = Model {
            enc: init_feature_stack(fc, fc, &mut rng)?,
            gen: init_feature_stack(fc, fc, &mut rng)?,
            inputs: ParamStore::new(),
        };
        model.inputs.insert("x", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check_model(
            &mut model,
            &["landmark_encoder", "background_generator", "inputs"],
            |m, name| match name {
                "landmark_encoder" => &mut m.enc,
                "background_generator" => &mut m.gen,
                _ => &mut m.inputs,
            },
            |m, tape| {
                let x = tape.param(&m.inputs, "x")?;
                let (f_land, f_back) = separate(tape, &m.enc, &m.gen, x, Lease::Train)?;
                let sl = tape.mul(f_land, f_land)?;
                let sb = tape.mul(f_back, f_back)?;
                let s = tape.add(sl, sb)?;
                tape.sum(s)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "separation_stacks", report: r });
    }

    // Reconstructor over a channel concatenation.
    {
        let mut store = init_feature_stack(fc, 2 * fc, &mut rng)?;
        store.insert("fl", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        store.insert("fb", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let fl = tape.param(st, "fl")?;
                let fb = tape.param(st, "fb")?;
                let y = reconstruct(tape, st, fl, fb, Lease::Train)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "reconstructor", report: r });
    }

    // Landmark discriminator head.
    {
        let mut store = init_landmark_disc(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let y = d_landmark_forward(tape, st, x, Lease::Train)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "landmark_disc", report: r });
    }

    // Domain discriminator through its sigmoid.
    {
        let mut store = init_domain_disc(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let y = d_domain_forward(tape, st, x, Lease::Train)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "domain_disc", report: r });
    }

    // AU head probabilities.
    {
        let mut store = init_au_head(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let y = au_head_forward(tape, st, x, Lease::Train)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "au_head", report: r });
    }

    // One projector pair inside a live network set, driving the
    // alignment loss so the 1x1 projections receive gradient.
    {
        let set = NetworkSet::new(cfg.clone(), 0x50)?;
        struct Model {
            set: NetworkSet,
            inputs: ParamStore,
        }
        let mut model = Model { set, inputs: ParamStore::new() };
        model.inputs.insert("a", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        model.inputs.insert("b", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        let cfg2 = cfg.clone();
        let r = grad_check_model(
            &mut model,
            &["projector_1_1", "projector_1_2", "inputs"],
            |m, name| match name {
                "projector_1_1" => m.set.projector_mut(1, 1).expect("projector store"),
                "projector_1_2" => m.set.projector_mut(1, 2).expect("projector store"),
                _ => &mut m.inputs,
            },
            |m, tape| {
                let a = tape.param(&m.inputs, "a")?;
                let b = tape.param(&m.inputs, "b")?;
                let pairs = [Some((a, b)), None, None, None, None, None];
                alignment_loss_pairs(
                    &cfg2,
                    tape,
                    &m.set,
                    &pairs,
                    &[true, false, false, false, false, false],
                    Lease::Train,
                )
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "projector_alignment", report: r });
    }

    // Landmark regression loss through the full branch.
    {
        let targets = land_targets(2, cfg.n_land);
        let mut store = init_landmark_branch(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, 1, 32, 32], 1.0, &mut rng))?;
        let cfg2 = cfg.clone();
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let pred = landmark_branch_forward(&cfg2, tape, st, x, Lease::Train)?;
                landmark_loss(tape, pred, &targets)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "loss_landmark", report: r });
    }

    // Weighted AU cross entropy through the AU head.
    {
        let targets = au_targets(2, cfg.n_au);
        let mut store = init_au_head(&cfg, &mut rng)?;
        store.insert("x", Tensor::uniform(&[2, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let probs = au_head_forward(tape, st, x, Lease::Train)?;
                au_loss(tape, probs, &targets)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "loss_au", report: r });
    }

    // Cooperative landmark-feature loss: gradient reaches both the
    // discriminator and the features.
    {
        let src = land_targets(1, cfg.n_land);
        let tgt = land_targets(1, cfg.n_land);
        let mut store = init_landmark_disc(&cfg, &mut rng)?;
        store.insert("f_sl", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        store.insert("f_tl", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let f_sl = tape.param(st, "f_sl")?;
                let f_tl = tape.param(st, "f_tl")?;
                landmark_feature_loss(tape, st, f_sl, f_tl, &src, &tgt, Lease::Train)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "loss_landmark_feature", report: r });
    }

    // Adversarial landmark pair: the discriminator member propagates into
    // the discriminator, the generator member into the features.
    {
        let src = land_targets(1, cfg.n_land);
        let tgt = land_targets(1, cfg.n_land);
        let mean = land_targets(1, cfg.n_land).remove(0);
        for (name, member) in
            [("loss_adv_landmark_d", 0usize), ("loss_adv_landmark_g", 1usize)]
        {
            let mut store = init_landmark_disc(&cfg, &mut rng)?;
            store.insert("f_sb", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
            store.insert("f_tb", Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
            let src = src.clone();
            let tgt = tgt.clone();
            let mean = mean.clone();
            let r = grad_check(
                &mut store,
                move |st, tape| {
                    let f_sb = tape.param(st, "f_sb")?;
                    let f_tb = tape.param(st, "f_tb")?;
                    let pair = adversarial_landmark_losses(
                        tape,
                        st,
                        f_sb,
                        f_tb,
                        &src,
                        &tgt,
                        Some(&mean),
                    )?;
                    Ok(if member == 0 { pair.d_step } else { pair.g_step })
                },
                &opts,
            )?;
            items.push(SuiteItem { name, report: r });
        }
    }

    // Adversarial domain pair, same structure.
    {
        for (name, member) in [("loss_adv_domain_d", 0usize), ("loss_adv_domain_g", 1usize)] {
            let mut store = init_domain_disc(&cfg, &mut rng)?;
            for feat in ["f_s", "f_t", "f_sltb", "f_sbtl"] {
                store.insert(feat, Tensor::uniform(&[1, fc, fs, fs], 1.0, &mut rng))?;
            }
            let r = grad_check(
                &mut store,
                move |st, tape| {
                    let f_s = tape.param(st, "f_s")?;
                    let f_t = tape.param(st, "f_t")?;
                    let f_sltb = tape.param(st, "f_sltb")?;
                    let f_sbtl = tape.param(st, "f_sbtl")?;
                    let pair =
                        adversarial_domain_losses(tape, st, f_s, f_t, f_sltb, f_sbtl)?;
                    Ok(if member == 0 { pair.d_step } else { pair.g_step })
                },
                &opts,
            )?;
            items.push(SuiteItem { name, report: r });
        }
    }

    // Weighted total over synthetic scalar components.
    {
        let weights = LossWeights::default();
        let mut store = ParamStore::new();
        store.insert("x", Tensor::uniform(&[6], 1.0, &mut rng))?;
        let r = grad_check(
            &mut store,
            |st, tape| {
                let x = tape.param(st, "x")?;
                let sq = tape.mul(x, x)?;
                let c = tape.mean(sq)?;
                let l = tape.mean(x)?;
                let scaled = tape.scale(x, 0.5)?;
                let au = tape.sum(scaled)?;
                let parts = LossComponents {
                    c: Some(c),
                    l: Some(l),
                    adl: None,
                    adf: None,
                    au: Some(au),
                    fl: None,
                };
                total_loss(tape, &weights, &parts)
            },
            &opts,
        )?;
        items.push(SuiteItem { name: "loss_total", report: r });
    }

    Ok(items)
}

pub fn suite_passed(items: &[SuiteItem]) -> bool {
    items.iter().all(|i| i.report.passed())
}

/// One line per item, then a verdict line.
pub fn format_suite(items: &[SuiteItem]) -> String {
    let mut out = String::new();
    let mut worst: f64 = 0.0;
    for item in items {
        worst = worst.max(item.report.max_rel_err());
        out.push_str(&format!(
            "{:<24} max_rel_err {:>10.3e}  {}\n",
            item.name,
            item.report.max_rel_err(),
            if item.report.passed() { "ok" } else { "FAIL" }
        ));
    }
    out.push_str(&format!(
        "gradient suite: {} of {} ok, worst {:.3e}\n",
        items.iter().filter(|i| i.report.passed()).count(),
        items.len(),
        worst
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_passes_at_default_tolerance() {
        let items = run_gradient_suite(1e-4).unwrap();
        assert!(items.len() >= 17);
        assert!(suite_passed(&items), "\n{}", format_suite(&items));
        let names: Vec<&str> = items.iter().map(|i| i.name).collect();
        for required in [
            "landmark_parts",
            "cbam",
            "extractor",
            "separation_stacks",
            "reconstructor",
            "landmark_disc",
            "domain_disc",
            "au_head",
            "projector_alignment",
        ] {
            assert!(names.contains(&required), "missing {required}");
        }
    }

    #[test]
    fn impossible_tolerance_fails() {
        let items = run_gradient_suite(1e-12).unwrap();
        assert!(!suite_passed(&items), "1e-12 sits below the rounding floor");
    }
}
