//! Optimizer, schedule, metrics and training-loop behavior.

mod common;

use mora::adapters::Variant;
use mora::train::{auroc, evaluate, lr_at, metrics, train, OptimConfig, StopReason};
use mora::model::Task;
use mora::Tensor;
use proptest::prelude::*;

fn short() -> OptimConfig {
    OptimConfig {
        epochs: 3,
        batch_size: 32,
        ..OptimConfig::default()
    }
}

fn snapshot(m: &mora::model::DualEncoderModel) -> Vec<Tensor> {
    m.params().into_iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn identical_inputs_give_identical_runs() {
    let recs = common::mixed_records(160, 1);
    let val = common::mixed_records(40, 2);
    let run = || {
        let mut m = common::desk_model(Variant::Mora, 3);
        let report = train(&mut m, &recs, &val, &short(), 9).unwrap();
        (serde_json::to_string(&report).unwrap(), snapshot(&m))
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let recs = common::mixed_records(64, 1);
    let mut m = common::desk_model(Variant::Mora, 3);
    let before = snapshot(&m);
    let cfg = OptimConfig { lr: 0.0, ..short() };
    let report = train(&mut m, &recs, &[], &cfg, 0).unwrap();
    assert_eq!(report.steps, 6);
    assert_eq!(snapshot(&m), before);
}

#[test]
fn zero_epochs_gives_empty_report() {
    let recs = common::mixed_records(16, 1);
    let mut m = common::desk_model(Variant::Mora, 3);
    let before = snapshot(&m);
    let report = train(&mut m, &recs, &recs, &OptimConfig { epochs: 0, ..short() }, 0).unwrap();
    assert!(report.epochs.is_empty() && report.lr_trace.is_empty());
    assert_eq!(report.stop_reason, StopReason::NoEpochs);
    assert_eq!(snapshot(&m), before);
    assert!(train(&mut m, &[], &recs, &short(), 0).is_err());
}

#[test]
fn training_reduces_loss_and_only_touches_trainables() {
    let recs = common::mixed_records(400, 1);
    let mut m = common::desk_model(Variant::Mora, 3);
    let frozen = m.frozen_checksum();
    let cfg = OptimConfig { epochs: 4, ..short() };
    let report = train(&mut m, &recs, &[], &cfg, 0).unwrap();
    let first = report.epochs.first().unwrap().train_loss;
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(m.frozen_checksum(), frozen);
    assert_eq!(report.lr_trace.len(), report.steps);
    assert_eq!(report.steps, 4 * 400usize.div_ceil(32));
}

#[test]
fn best_epoch_is_restored() {
    let recs = common::mixed_records(160, 1);
    let val = common::mixed_records(60, 2);
    let mut m = common::desk_model(Variant::Mora, 3);
    let report = train(&mut m, &recs, &val, &short(), 0).unwrap();
    let best = report.best_val_metric.unwrap();
    assert_eq!(
        report.epochs.iter().map(|e| e.val_metric.unwrap()).fold(f64::MIN, f64::max),
        best
    );
    assert_eq!(evaluate(&m, &val).unwrap().accuracy, best);
}

#[test]
fn multilabel_and_binary_tasks_train() {
    let recs = common::mixed_records(64, 1);
    let mut m = common::desk_model(Variant::Mora, 3);
    // single-hot labels are valid multi-hot labels
    m.config.task = Task::Multilabel;
    train(&mut m, &recs, &recs[..16], &OptimConfig { epochs: 1, ..short() }, 0).unwrap();
    let met = evaluate(&m, &recs).unwrap();
    assert!(met.auroc.is_none() && (0.0..=1.0).contains(&met.macro_f1));

    let logits = Tensor::from_rows(&[&[0.0, 2.0], &[1.0, 0.0], &[0.0, 0.5], &[3.0, 0.0]]).unwrap();
    let labels = vec![vec![0, 1], vec![1, 0], vec![1, 0], vec![1, 0]];
    let met = metrics(&logits, &labels, Task::Binary).unwrap();
    assert_eq!(met.accuracy, 0.75);
    // score l1 - l0: positives {2.0}, negatives {-1.0, 0.5, -3.0}
    assert_eq!(met.auroc, Some(1.0));
}

fn pairwise_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pairs_and_ignores_monotone_maps(
        raw in proptest::collection::vec((-20i32..20, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 10.0).collect();
        let pos: Vec<bool> = raw.iter().map(|(_, p)| *p).collect();
        prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
        let base = auroc(&scores, &pos).unwrap();
        prop_assert!((base - pairwise_auc(&scores, &pos)).abs() < 1e-12);
        for f in [|x: f64| 3.0 * x - 7.0, |x: f64| x.exp(), |x: f64| x * x * x, |x: f64| x.atan()] {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(auroc(&mapped, &pos).unwrap(), base);
        }
    }

    #[test]
    fn schedule_is_bounded_and_continuous(total in 1usize..5000, frac in 0.0f64..0.99, lr in 1e-4f64..1.0) {
        let cfg = OptimConfig { lr, warmup_fraction: frac, ..OptimConfig::default() };
        let warm = (frac * total as f64).ceil() as usize;
        for step in 0..=total {
            let v = lr_at(step, total, &cfg).unwrap();
            prop_assert!((0.0..=lr).contains(&v));
        }
        if warm > 0 && warm < total {
            // both pieces agree at the junction
            let warm_piece = lr * warm as f64 / warm as f64;
            prop_assert!((lr_at(warm, total, &cfg).unwrap() - warm_piece).abs() <= 1e-12);
        }
        prop_assert!(lr_at(total + 1, total, &cfg).is_err());
    }
}

#[test]
fn different_replicate_seeds_shuffle_differently() {
    let recs = common::mixed_records(96, 1);
    let cfg = OptimConfig { epochs: 1, ..short() };
    let mut a = common::desk_model(Variant::Mora, 3);
    let mut b = a.clone();
    train(&mut a, &recs, &[], &cfg, 0).unwrap();
    train(&mut b, &recs, &[], &cfg, 1).unwrap();
    assert_ne!(snapshot(&a), snapshot(&b));
}
