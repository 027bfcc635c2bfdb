mod common;

use std::sync::Mutex;

use common::small_sampling;
use xlu_core::channel::ArrayGeometry;
use xlu_core::eval::{
    run_sweep, CovarianceSource, Estimator, EstimatorFactory, LmmseFactory, Oracle, PointContext, SweepAxis, SweepBase,
    SweepSpec, TrialInput, NMSE_DB_SENTINEL,
};
use xlu_core::{Error, Result};

fn spec(axis: SweepAxis, values: Vec<f64>, estimators: &[&str], trials: usize) -> SweepSpec {
    SweepSpec {
        axis,
        values,
        base: SweepBase {
            geometry: ArrayGeometry::ula(16, 100e9, 10e9, 4).unwrap(),
            sampling: small_sampling(),
            pilots: 2,
            rf_chains: 4,
            snr_db: 10.0,
        },
        estimators: estimators.iter().map(|s| s.to_string()).collect(),
        trials,
        seed: 3,
        domain: "test".into(),
    }
}

/// Records the digest of every input it is shown and returns zeros.
struct Audit {
    name: &'static str,
    seen: Mutex<Vec<[u8; 32]>>,
}

impl Audit {
    fn new(name: &'static str) -> Self {
        Audit { name, seen: Mutex::new(Vec::new()) }
    }
}

struct AuditAt<'a>(&'a Mutex<Vec<[u8; 32]>>);

impl Estimator<f64> for AuditAt<'static> {
    fn estimate(&self, input: &TrialInput<f64>) -> Result<Vec<num_complex::Complex64>> {
        self.0.lock().unwrap().push(input.digest());
        Ok(vec![num_complex::Complex64::new(0.0, 0.0); input.h.len()])
    }
}

impl EstimatorFactory<f64> for &'static Audit {
    fn name(&self) -> &str {
        self.name
    }

    fn prepare(&self, _: &PointContext<f64>) -> Result<Box<dyn Estimator<f64>>> {
        Ok(Box::new(AuditAt(&self.seen)))
    }
}

#[test]
fn oracle_hits_the_sentinel_with_no_failures() {
    let res = run_sweep::<f64>(&spec(SweepAxis::Snr, vec![0.0, 10.0], &["oracle"], 6), &[&Oracle], "h").unwrap();
    for p in &res.points {
        assert_eq!(p.mean_db, NMSE_DB_SENTINEL);
        assert_eq!((p.trials, p.failures), (6, 0));
    }
}

#[test]
fn single_trial_has_zero_spread() {
    let lmmse = LmmseFactory { source: CovarianceSource::Sampled(50) };
    let res = run_sweep::<f64>(&spec(SweepAxis::Snr, vec![5.0], &["lmmse"], 1), &[&lmmse], "h").unwrap();
    assert_eq!(res.points[0].std_db, 0.0);
    assert!(res.points[0].mean_db.is_finite());
}

#[test]
fn sweeps_are_deterministic() {
    let lmmse = LmmseFactory { source: CovarianceSource::Sampled(50) };
    let s = spec(SweepAxis::PilotOverhead, vec![8.0, 16.0], &["lmmse", "oracle"], 5);
    let a = run_sweep::<f64>(&s, &[&lmmse, &Oracle], "h").unwrap();
    let b = run_sweep::<f64>(&s, &[&lmmse, &Oracle], "h").unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.input_digests, b.input_digests);
    assert_eq!(a.points.iter().map(|p| p.per_trial.clone()).collect::<Vec<_>>(), b.points.iter().map(|p| p.per_trial.clone()).collect::<Vec<_>>());
}

#[test]
fn every_estimator_sees_identical_inputs() {
    let first: &'static Audit = Box::leak(Box::new(Audit::new("first")));
    let second: &'static Audit = Box::leak(Box::new(Audit::new("second")));
    run_sweep::<f64>(&spec(SweepAxis::Snr, vec![0.0, 20.0], &["first", "second"], 7), &[&first, &second], "h").unwrap();
    let mut a = first.seen.lock().unwrap().clone();
    let mut b = second.seen.lock().unwrap().clone();
    assert_eq!(a.len(), 14);
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn snr_points_share_channels() {
    // trial i draws the same channel at every SNR, so only the noise changes
    let lmmse = LmmseFactory { source: CovarianceSource::Sampled(200) };
    let res = run_sweep::<f64>(&spec(SweepAxis::Snr, vec![-5.0, 10.0, 25.0], &["lmmse"], 20), &[&lmmse], "h").unwrap();
    let db: Vec<f64> = res.points.iter().map(|p| p.mean_db).collect();
    assert!(db[0] > db[1] && db[1] > db[2], "{db:?}");
}

#[test]
fn unknown_estimators_are_validation_errors() {
    let err = run_sweep::<f64>(&spec(SweepAxis::Snr, vec![0.0], &["ls"], 2), &[&Oracle], "h").unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert!(err.to_string().contains("oracle"));
}

#[test]
fn pilot_axis_rejects_partial_rf_groups() {
    let err = run_sweep::<f64>(&spec(SweepAxis::PilotOverhead, vec![6.0], &["oracle"], 2), &[&Oracle], "h").unwrap_err();
    assert!(err.is_validation());
}
