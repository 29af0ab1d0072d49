//! Confusion-count metric tests, including a brute-force recount oracle.

use ausep_core::eval::ConfusionCounts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[test]
fn update_routes_outcomes_including_the_boundary() {
    let mut c = ConfusionCounts::new(1).unwrap();
    c.update(&[0.7], &[1], 0.5).unwrap();
    assert_eq!(c.cell(0), (1, 0, 0, 0));
    // A probability exactly at the threshold counts as positive.
    c.update(&[0.5], &[0], 0.5).unwrap();
    assert_eq!(c.cell(0), (1, 1, 0, 0));
    c.update(&[0.2], &[0], 0.5).unwrap();
    assert_eq!(c.cell(0), (1, 1, 1, 0));
    c.update(&[0.2], &[1], 0.5).unwrap();
    assert_eq!(c.cell(0), (1, 1, 1, 1));
    assert_eq!(c.total(), 4);
}

#[test]
fn update_rejects_bad_inputs() {
    let mut c = ConfusionCounts::new(2).unwrap();
    assert!(c.update(&[0.5, 0.5], &[0, 1], 0.0).is_err());
    assert!(c.update(&[0.5, 0.5], &[0, 1], 1.0).is_err());
    assert!(c.update(&[0.5], &[0, 1], 0.5).is_err());
    assert!(c.update(&[0.5, f64::NAN], &[0, 1], 0.5).is_err());
    assert!(c.update(&[0.5, 0.5], &[0, 2], 0.5).is_err());
    assert!(ConfusionCounts::new(0).is_err());
    assert_eq!(c.total(), 0, "rejected updates must not change counts");
}

#[test]
fn f1_hand_values_and_zero_convention() {
    let c = ConfusionCounts::from_cells(&[(2, 1, 0, 1)]).unwrap();
    assert!((c.f1(0) - 2.0 / 3.0).abs() < 1e-12);
    let perfect = ConfusionCounts::from_cells(&[(5, 0, 2, 0)]).unwrap();
    assert_eq!(perfect.f1(0), 1.0);
    let empty = ConfusionCounts::from_cells(&[(0, 0, 7, 0)]).unwrap();
    assert_eq!(empty.f1(0), 0.0);
}

#[test]
fn accuracy_hand_values_and_empty_error() {
    let c = ConfusionCounts::from_cells(&[(1, 1, 1, 1)]).unwrap();
    assert!((c.accuracy(0).unwrap() - 0.5).abs() < 1e-12);
    let perfect = ConfusionCounts::from_cells(&[(3, 0, 4, 0)]).unwrap();
    assert_eq!(perfect.accuracy(0).unwrap(), 1.0);
    let fresh = ConfusionCounts::new(3).unwrap();
    assert!(fresh.accuracy(1).is_err());
    assert!(fresh.mean_accuracy().is_err());
}

#[test]
fn from_cells_requires_equal_totals() {
    let err = ConfusionCounts::from_cells(&[(1, 0, 0, 0), (1, 1, 0, 0)]).unwrap_err();
    assert!(err.to_string().contains("unit 1"), "{err}");
}

#[test]
fn report_averages_and_stability() {
    // Six units with F1 exactly 10%..60%, all over 100 samples.
    let c = ConfusionCounts::from_cells(&[
        (1, 9, 81, 9),
        (1, 4, 91, 4),
        (3, 7, 83, 7),
        (1, 2, 96, 1),
        (1, 1, 97, 1),
        (3, 2, 93, 2),
    ])
    .unwrap();
    for (k, want) in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6].into_iter().enumerate() {
        assert!((c.f1(k) - want).abs() < 1e-12, "unit {k}: {}", c.f1(k));
    }
    assert!((c.mean_f1() - 0.35).abs() < 1e-12);
    let text = c.report_text().unwrap();
    assert!(text.contains("35.00"), "{text}");
    assert_eq!(text, c.report_text().unwrap());
    assert_eq!(text.lines().count(), 8, "header, six units, average");

    let single = ConfusionCounts::from_cells(&[(2, 1, 5, 1)]).unwrap();
    assert!((single.mean_f1() - single.f1(0)).abs() < 1e-15);
    assert!(
        (single.mean_accuracy().unwrap() - single.accuracy(0).unwrap()).abs() < 1e-15
    );

    let tsv = c.report_tsv().unwrap();
    assert_eq!(tsv.lines().count(), 8);
    assert!(tsv.starts_with("unit\tf1\taccuracy"));
    assert!(tsv.contains("au_2\t0.300000"));
}

fn random_case(rng: &mut ChaCha20Rng, n_au: usize, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<u8>>) {
    let probs = (0..n)
        .map(|_| (0..n_au).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let labels = (0..n)
        .map(|_| (0..n_au).map(|_| u8::from(rng.gen_bool(0.5))).collect())
        .collect();
    (probs, labels)
}

/// Independent recount: keep every prediction, then count with filters.
fn brute_force(
    probs: &[Vec<f64>],
    labels: &[Vec<u8>],
    threshold: f64,
    n_au: usize,
) -> Vec<(f64, f64)> {
    (0..n_au)
        .map(|k| {
            let preds: Vec<(bool, bool)> = probs
                .iter()
                .zip(labels)
                .map(|(p, y)| (p[k] >= threshold, y[k] == 1))
                .collect();
            let count = |f: fn(&(bool, bool)) -> bool| preds.iter().filter(|o| f(o)) .count() as f64;
            let tp = count(|&(p, y)| p && y);
            let fp = count(|&(p, y)| p && !y);
            let tn = count(|&(p, y)| !p && !y);
            let fneg = count(|&(p, y)| !p && y);
            let f1 = if tp == 0.0 && fp == 0.0 && fneg == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            };
            (f1, (tp + tn) / preds.len() as f64)
        })
        .collect()
}

#[test]
fn streaming_counts_match_brute_force_recounts() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    for case in 0..50 {
        let n_au = rng.gen_range(1..6);
        let n = rng.gen_range(1..80);
        let threshold = rng.gen_range(0.2..0.8);
        let (probs, labels) = random_case(&mut rng, n_au, n);
        let mut c = ConfusionCounts::new(n_au).unwrap();
        for (p, y) in probs.iter().zip(&labels) {
            c.update(p, y, threshold).unwrap();
        }
        let expected = brute_force(&probs, &labels, threshold, n_au);
        for (k, &(f1, acc)) in expected.iter().enumerate() {
            assert!((c.f1(k) - f1).abs() < 1e-12, "case {case} unit {k} f1");
            assert!(
                (c.accuracy(k).unwrap() - acc).abs() < 1e-12,
                "case {case} unit {k} accuracy"
            );
        }
    }
}

#[test]
fn metrics_are_order_invariant_and_shards_merge() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let n_au = 4;
    let (probs, labels) = random_case(&mut rng, n_au, 60);

    let mut sequential = ConfusionCounts::new(n_au).unwrap();
    for (p, y) in probs.iter().zip(&labels) {
        sequential.update(p, y, 0.5).unwrap();
    }

    // Reversed order.
    let mut reversed = ConfusionCounts::new(n_au).unwrap();
    for (p, y) in probs.iter().zip(&labels).rev() {
        reversed.update(p, y, 0.5).unwrap();
    }
    assert_eq!(sequential, reversed);

    // Three shards, then merge.
    let mut merged = ConfusionCounts::new(n_au).unwrap();
    for chunk in 0..3 {
        let mut shard = ConfusionCounts::new(n_au).unwrap();
        for i in (chunk..60).step_by(3) {
            shard.update(&probs[i], &labels[i], 0.5).unwrap();
        }
        merged.merge(&shard).unwrap();
    }
    assert_eq!(sequential, merged);
    assert_eq!(sequential.report_tsv().unwrap(), merged.report_tsv().unwrap());

    let other = ConfusionCounts::new(2).unwrap();
    assert!(merged.merge(&other).is_err());
}
