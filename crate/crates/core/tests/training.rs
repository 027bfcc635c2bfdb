mod common;

use common::{config, small_sets};
use proptest::prelude::*;
use xlu_core::linalg::Matrix;
use xlu_core::rng::{complex_normal, stream};
use xlu_core::training::{augment_pairs, train, DualState, TrainConfig, TrainReport, TrainSetup};
use xlu_core::unrolled::{IoShape, SplitBatch, UnrolledModel};

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_realizations: 2,
        dual_step: 0.5,
        trace_dual: true,
        ..TrainConfig::desk()
    }
}

fn run(cfg: &TrainConfig, lambda0: f64) -> (UnrolledModel<f32>, TrainReport) {
    let (tr, val, a) = small_sets();
    let setup = TrainSetup {
        train: &tr,
        val: &val,
        combiner: &a,
        first_epoch: 0,
    };
    let model = UnrolledModel::<f32>::new(config(3, IoShape { height: 4, width: 4 }), 0.3, &mut stream(1, "init", 0)).unwrap();
    let mut dual = DualState::new(3, cfg.epsilon, cfg.dual_step).unwrap();
    dual.lambda.fill(lambda0);
    train(&setup, model, dual, cfg, &mut stream(1, "train", 0), |_, _, _| Ok(())).unwrap()
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (model, report) = run(&quick(0), 0.0);
    let fresh = UnrolledModel::<f32>::new(config(3, IoShape { height: 4, width: 4 }), 0.3, &mut stream(1, "init", 0)).unwrap();
    assert_eq!(model.params, fresh.params);
    assert!(report.epochs.is_empty() && report.best_epoch.is_none());
}

#[test]
fn unconstrained_runs_keep_every_multiplier_at_zero() {
    let cfg = TrainConfig {
        unconstrained: true,
        ..quick(3)
    };
    let (_, report) = run(&cfg, 2.0);
    assert_eq!(report.epochs.len(), 3);
    assert!(report.epochs.iter().all(|e| e.lambda.iter().all(|&l| l == 0.0)));
    assert!(report.dual_trace.is_empty());
}

#[test]
fn frozen_multipliers_reproduce_the_unconstrained_run_bit_for_bit() {
    let free = TrainConfig {
        unconstrained: true,
        ..quick(3)
    };
    let frozen = TrainConfig {
        dual_step: 0.0,
        ..quick(3)
    };
    let (m1, r1) = run(&free, 0.0);
    let (m2, r2) = run(&frozen, 0.0);
    assert_eq!(m1.params, m2.params);
    let curves = |r: &TrainReport| r.epochs.iter().map(|e| (e.loss, e.val_nmse_db.clone())).collect::<Vec<_>>();
    assert_eq!(curves(&r1), curves(&r2));
}

#[test]
fn dual_updates_stay_nonnegative_and_rise_under_violation() {
    let (_, report) = run(&quick(3), 0.0);
    assert!(!report.dual_trace.is_empty());
    for d in &report.dual_trace {
        for t in 0..d.after.len() {
            assert!(d.after[t] >= 0.0);
            if d.constraints[t] > 0.0 {
                assert!(d.after[t] >= d.before[t]);
            }
        }
    }
}

#[test]
fn training_is_reproducible() {
    let (m1, r1) = run(&quick(2), 0.0);
    let (m2, r2) = run(&quick(2), 0.0);
    assert_eq!(m1.params, m2.params);
    assert_eq!(r1, r2);
}

proptest! {
    #[test]
    fn projected_dual_step_is_nonnegative(
        lambda in prop::collection::vec(0.0f64..5.0, 1..6),
        c in prop::collection::vec(-10.0f64..10.0, 6),
        step in 0.0f64..3.0,
    ) {
        let mut d = DualState::new(lambda.len(), 0.1, step).unwrap();
        d.lambda = lambda.clone();
        d.dual_step(&c[..lambda.len()]);
        for (t, (&after, &before)) in d.lambda.iter().zip(&lambda).enumerate() {
            prop_assert!(after >= 0.0);
            if c[t] > 0.0 {
                prop_assert!(after >= before);
            }
        }
    }

    #[test]
    fn augmentation_preserves_the_measurement_model(seed in 0u64..5000) {
        let mut rng = stream(seed, "aug", 0);
        let (_, _, a) = small_sets();
        let a64: Matrix<f64> = a.cast();
        let hs: Vec<Vec<_>> = (0..3).map(|_| (0..16).map(|_| complex_normal::<f64, _>(&mut rng)).collect()).collect();
        let ys: Vec<Vec<_>> = hs.iter().map(|h| a64.to_complex().matvec(h)).collect();
        let mut h = SplitBatch::from_complex(16, hs.iter().map(|v| v.as_slice())).unwrap();
        let mut y = SplitBatch::from_complex(a.rows, ys.iter().map(|v| v.as_slice())).unwrap();
        augment_pairs(&mut y, &mut h, &mut rng);
        for b in 0..3 {
            let want = a64.to_complex().matvec(&h.sample(b));
            for (p, q) in y.sample(b).iter().zip(&want) {
                prop_assert!((p - q).norm() < 1e-12);
            }
            prop_assert!((h.norm_sqr(b) - hs[b].iter().map(|z| z.norm_sqr()).sum::<f64>()).abs() < 1e-10);
        }
    }
}
