//! NMSE metrics, paired experiment sweeps, layer-wise diagnostics and
//! complexity accounting.

use std::fmt::Write as _;

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{synthesize_channel, ArrayGeometry, ArrayKind, Path, PathSampling, PathSet, Visibility};
use crate::data::{realize, PairSet};
use crate::error::{Error, Result};
use crate::estimators::{build_polar_dictionary, empirical_covariance, omp_with_operator, polar_projection};
use crate::estimators::{LmmseOperator, OmpOperator, PolarDictionary, PolarGrid};
use crate::linalg::{CMatrix, Matrix};
use crate::measurement::{make_combiner, Combiner};
use crate::nn::ProxNetSpec;
use crate::rng::{stream, StreamRng};
use crate::scalar::Real;
use crate::unrolled::{IoShape, SplitBatch, UnrolledModel};

/// Written in place of `−∞ dB` (exact recovery).
pub const NMSE_DB_SENTINEL: f64 = -200.0;

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_DB_SENTINEL
    } else {
        (10.0 * linear.log10()).max(NMSE_DB_SENTINEL)
    }
}

/// `‖ĥ − h‖² / ‖h‖²`, `None` when `h = 0`.
pub fn sample_nmse<T: Real>(h_hat: &[Complex<T>], h: &[Complex<T>]) -> Option<f64> {
    assert_eq!(h_hat.len(), h.len(), "nmse operands differ in length");
    let energy: f64 = h.iter().map(|z| z.norm_sqr().as_f64()).sum();
    if energy == 0.0 {
        return None;
    }
    let err: f64 = h_hat.iter().zip(h).map(|(a, b)| (a - b).norm_sqr().as_f64()).sum();
    Some(err / energy)
}

/// Running mean of per-vector NMSE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub sum: f64,
    pub count: usize,
    /// Truth vectors with zero norm, left out of the mean.
    pub zero_norm: usize,
}

impl Nmse {
    pub fn push<T: Real>(&mut self, h_hat: &[Complex<T>], h: &[Complex<T>]) {
        match sample_nmse(h_hat, h) {
            Some(v) => {
                self.sum += v;
                self.count += 1;
            }
            None => self.zero_norm += 1,
        }
    }

    /// Accumulates every length-`n` row of a flattened `M x n` pair.
    pub fn push_rows<T: Real>(&mut self, h_hat: &[Complex<T>], h: &[Complex<T>], n: usize) {
        for (a, b) in h_hat.chunks(n).zip(h.chunks(n)) {
            self.push(a, b);
        }
    }

    pub fn linear(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn db(&self) -> f64 {
        to_db(self.linear())
    }
}

/// Mean NMSE of a whole set of flattened estimates.
pub fn nmse<T: Real>(h_hat: &[Complex<T>], h: &[Complex<T>], n: usize) -> Result<Nmse> {
    if h_hat.len() != h.len() || n == 0 || h.len() % n != 0 {
        return Err(Error::shape("nmse operands", h.len(), h_hat.len()));
    }
    let mut acc = Nmse::default();
    acc.push_rows(h_hat, h, n);
    Ok(acc)
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample errors of every unrolled state `h_0 .. h_T` on a set.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerErrors {
    /// `dist[t][k] = ‖h_t − h‖` for pair `k`.
    pub dist: Vec<Vec<f64>>,
    /// `‖h‖²` per pair.
    pub energy: Vec<f64>,
}

impl LayerErrors {
    pub fn layers(&self) -> usize {
        self.dist.len().saturating_sub(1)
    }

    /// Per-pair NMSE of state `t`, zero-norm pairs skipped.
    pub fn nmse(&self, t: usize) -> Vec<f64> {
        self.dist[t]
            .iter()
            .zip(&self.energy)
            .filter(|(_, &e)| e > 0.0)
            .map(|(d, e)| d * d / e)
            .collect()
    }

    pub fn mean_linear(&self) -> Vec<f64> {
        (0..self.dist.len()).map(|t| mean_std(&self.nmse(t)).0).collect()
    }

    pub fn mean_db(&self) -> Vec<f64> {
        self.mean_linear().into_iter().map(to_db).collect()
    }

    /// Mean `‖h_t − h‖` per state.
    pub fn mean_distance(&self) -> Vec<f64> {
        self.dist.iter().map(|d| mean_std(d).0).collect()
    }

    /// Share of pairs whose error grows from `h_{t−1}` to `h_t`, `t = 1..T`.
    pub fn violation_rate(&self) -> Vec<f64> {
        (1..self.dist.len())
            .map(|t| {
                let n = self.dist[t].len().max(1) as f64;
                self.dist[t].iter().zip(&self.dist[t - 1]).filter(|(a, b)| a > b).count() as f64 / n
            })
            .collect()
    }

    pub fn curve(&self) -> LayerCurve {
        let mut curve = LayerCurve::default();
        for t in 0..self.dist.len() {
            let lin = self.nmse(t);
            let mut db: Vec<f64> = lin.iter().map(|&v| to_db(v)).collect();
            db.sort_by(f64::total_cmp);
            let (mean, _) = mean_std(&lin);
            let (_, std_db) = mean_std(&db);
            curve.mean_db.push(to_db(mean));
            curve.std_db.push(std_db);
            curve.p10_db.push(percentile(&db, 0.1));
            curve.p90_db.push(percentile(&db, 0.9));
        }
        curve.violation_rate = self.violation_rate();
        curve
    }
}

/// NMSE per state `h_0 .. h_T`, in dB. Bands are over per-pair NMSE in dB.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub mean_db: Vec<f64>,
    pub std_db: Vec<f64>,
    pub p10_db: Vec<f64>,
    pub p90_db: Vec<f64>,
    /// `t = 1..T`.
    pub violation_rate: Vec<f64>,
}

impl LayerCurve {
    pub fn band_width(&self, t: usize) -> f64 {
        self.p90_db[t] - self.p10_db[t]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_db,std_db,p10_db,p90_db,violation_rate\n");
        for t in 0..self.mean_db.len() {
            let v = if t == 0 { 0.0 } else { self.violation_rate[t - 1] };
            let _ = writeln!(out, "{t},{},{},{},{},{v}", self.mean_db[t], self.std_db[t], self.p10_db[t], self.p90_db[t]);
        }
        out
    }
}

/// Runs `model` over every pair of `set` and records the distance of each
/// state to the truth.
pub fn layer_errors<T: Real>(model: &UnrolledModel<T>, set: &PairSet<T>, a: &Matrix<T>) -> Result<LayerErrors> {
    const CHUNK: usize = 4;
    let ids: Vec<usize> = (0..set.realizations()).collect();
    let parts: Vec<(Vec<Vec<f64>>, Vec<f64>)> = ids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let (y, h) = set.batch(chunk)?;
            let traj = model.forward(a, &y)?;
            let dist = traj
                .states
                .iter()
                .map(|s| {
                    (0..h.batch)
                        .map(|b| {
                            (0..2)
                                .flat_map(|p| s.part(p, b).iter().zip(h.part(p, b)))
                                .map(|(&x, &y)| (x - y).as_f64().powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .collect()
                })
                .collect();
            let energy = (0..h.batch).map(|b| h.norm_sqr(b).as_f64()).collect();
            Ok((dist, energy))
        })
        .collect::<Result<_>>()?;
    let states = model.layers() + 1;
    let mut out = LayerErrors {
        dist: vec![Vec::with_capacity(set.pairs()); states],
        energy: Vec::with_capacity(set.pairs()),
    };
    for (dist, energy) in parts {
        for (acc, d) in out.dist.iter_mut().zip(dist) {
            acc.extend(d);
        }
        out.energy.extend(energy);
    }
    Ok(out)
}

/// Per-layer NMSE means with std and 10/90 percentile bands.
pub fn layerwise_curve<T: Real>(model: &UnrolledModel<T>, set: &PairSet<T>, a: &Matrix<T>) -> Result<LayerCurve> {
    Ok(layer_errors(model, set, a)?.curve())
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Snr,
    /// Total measurements `P·N_RF`; `N_RF` stays fixed.
    PilotOverhead,
    PathCount,
    /// Unrolled network truncated after layer `t`.
    LayerIndex,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr_db",
            SweepAxis::PilotOverhead => "measurements",
            SweepAxis::PathCount => "paths",
            SweepAxis::LayerIndex => "layer",
        }
    }
}

/// Settings shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBase {
    pub geometry: ArrayGeometry,
    pub sampling: PathSampling,
    pub pilots: usize,
    pub rf_chains: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: SweepBase,
    pub estimators: Vec<String>,
    pub trials: usize,
    pub seed: u64,
    /// Realizations are drawn from this split's streams.
    #[serde(default = "default_domain")]
    pub domain: String,
}

fn default_domain() -> String {
    "test".into()
}

/// Resolved settings of one sweep point.
#[derive(Debug, Clone)]
pub struct PointContext<T> {
    pub value: f64,
    pub geometry: ArrayGeometry,
    pub sampling: PathSampling,
    pub combiner: Combiner<T>,
    pub snr_db: f64,
    pub layer: Option<usize>,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Validation("sweep needs at least one axis value".into()));
        }
        if self.trials == 0 {
            return Err(Error::Validation("sweep needs at least one trial".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Validation("sweep needs at least one estimator".into()));
        }
        self.base.geometry.validate()?;
        self.base.sampling.validate()?;
        let integral = |v: f64| v >= 0.0 && v.fract() == 0.0;
        match self.axis {
            SweepAxis::Snr => {
                if let Some(v) = self.values.iter().find(|v| v.is_nan() || **v == f64::NEG_INFINITY) {
                    return Err(Error::Validation(format!("invalid SNR value {v}")));
                }
            }
            SweepAxis::PilotOverhead => {
                for &v in &self.values {
                    if !integral(v) || v == 0.0 || (v as usize) % self.base.rf_chains != 0 {
                        return Err(Error::Validation(format!(
                            "measurement count {v} is not a positive multiple of N_RF = {}",
                            self.base.rf_chains
                        )));
                    }
                }
            }
            SweepAxis::PathCount | SweepAxis::LayerIndex => {
                if let Some(v) = self.values.iter().find(|&&v| !integral(v)) {
                    return Err(Error::Validation(format!("{} value {v} must be a non-negative integer", self.axis.name())));
                }
            }
        }
        Ok(())
    }

    pub fn point<T: Real>(&self, value: f64) -> Result<PointContext<T>> {
        let b = &self.base;
        let mut pilots = b.pilots;
        let mut sampling = b.sampling.clone();
        let mut snr_db = b.snr_db;
        let mut layer = None;
        match self.axis {
            SweepAxis::Snr => snr_db = value,
            SweepAxis::PilotOverhead => pilots = value as usize / b.rf_chains,
            SweepAxis::PathCount => sampling.paths = value as usize,
            SweepAxis::LayerIndex => layer = Some(value as usize),
        }
        let combiner = make_combiner(b.geometry.antennas, pilots, b.rf_chains, &mut stream(self.seed, "combiner", 0))?;
        Ok(PointContext {
            value,
            geometry: b.geometry.clone(),
            sampling,
            combiner,
            snr_db,
            layer,
            seed: self.seed,
        })
    }
}

/// One realization as seen by every estimator of a trial.
#[derive(Debug, Clone)]
pub struct TrialInput<T> {
    /// `M x N` ground truth, row-major by subcarrier.
    pub h: Vec<Complex<T>>,
    /// `M x P·N_RF` observations.
    pub y: Vec<Complex<T>>,
    pub sigma2: T,
}

impl<T: Real> TrialInput<T> {
    /// SHA-256 over the observations and the truth.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for z in self.y.iter().chain(&self.h) {
            hasher.update(z.re.as_f64().to_le_bytes());
            hasher.update(z.im.as_f64().to_le_bytes());
        }
        hasher.update(self.sigma2.as_f64().to_le_bytes());
        hasher.finalize().into()
    }
}

/// Estimator bound to one sweep point.
pub trait Estimator<T: Real>: Send + Sync {
    /// Returns the `M x N` estimate. Only the oracle may read `input.h`.
    fn estimate(&self, input: &TrialInput<T>) -> Result<Vec<Complex<T>>>;
}

/// Builds an [`Estimator`] for each sweep point.
pub trait EstimatorFactory<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn prepare(&self, ctx: &PointContext<T>) -> Result<Box<dyn Estimator<T>>>;
}

/// Returns the truth.
pub struct Oracle;

impl<T: Real> Estimator<T> for Oracle {
    fn estimate(&self, input: &TrialInput<T>) -> Result<Vec<Complex<T>>> {
        Ok(input.h.clone())
    }
}

impl<T: Real> EstimatorFactory<T> for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn prepare(&self, _: &PointContext<T>) -> Result<Box<dyn Estimator<T>>> {
        Ok(Box::new(Oracle))
    }
}

/// Where the LMMSE prior comes from.
#[derive(Debug, Clone)]
pub enum CovarianceSource<T> {
    /// Empirical covariance of this many fresh realizations (all
    /// subcarriers pooled) drawn with the point's path sampling.
    Sampled(usize),
    Fixed(CMatrix<T>),
}

pub struct LmmseFactory<T> {
    pub source: CovarianceSource<T>,
}

struct LmmseAt<T> {
    op: LmmseOperator<T>,
    antennas: usize,
    measurements: usize,
}

impl<T: Real> Estimator<T> for LmmseAt<T> {
    fn estimate(&self, input: &TrialInput<T>) -> Result<Vec<Complex<T>>> {
        let mut out = Vec::with_capacity(input.h.len());
        for y in input.y.chunks(self.measurements) {
            let est = self.op.estimate(y, input.sigma2)?;
            debug_assert_eq!(est.h_hat.len(), self.antennas);
            out.extend(est.h_hat);
        }
        Ok(out)
    }
}

/// Pooled covariance of `count` realizations from the `"covariance"` stream.
pub fn sampled_covariance<T: Real>(geom: &ArrayGeometry, sampling: &PathSampling, count: usize, seed: u64) -> Result<CMatrix<T>> {
    let channels: Vec<Vec<Complex<T>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let paths = crate::channel::sample_paths::<T, _>(geom, sampling, &mut stream(seed, "covariance", i as u64))?;
            Ok(synthesize_channel(geom, &paths)?.values)
        })
        .collect::<Result<_>>()?;
    empirical_covariance(geom.antennas, channels.iter().flat_map(|h| h.chunks(geom.antennas)))
}

impl<T: Real> EstimatorFactory<T> for LmmseFactory<T> {
    fn name(&self) -> &str {
        "lmmse"
    }

    fn prepare(&self, ctx: &PointContext<T>) -> Result<Box<dyn Estimator<T>>> {
        let r_h = match &self.source {
            CovarianceSource::Sampled(count) => sampled_covariance(&ctx.geometry, &ctx.sampling, *count, ctx.seed)?,
            CovarianceSource::Fixed(r) => r.clone(),
        };
        let op = LmmseOperator::new(&ctx.combiner.to_complex(), &r_h)?;
        Ok(Box::new(LmmseAt {
            op,
            antennas: ctx.geometry.antennas,
            measurements: ctx.combiner.rows,
        }))
    }
}

/// OMP over a polar dictionary built at every subcarrier frequency.
pub struct OmpFactory {
    pub grid: PolarGrid,
    /// Atoms per subcarrier; `None` uses twice the path count.
    pub k_max: Option<usize>,
    /// Build one dictionary at the carrier instead of one per subcarrier.
    pub carrier_only: bool,
}

struct OmpAt<T> {
    dicts: Vec<(PolarDictionary<T>, OmpOperator<T>)>,
    k_max: usize,
    measurements: usize,
}

impl<T: Real> Estimator<T> for OmpAt<T> {
    fn estimate(&self, input: &TrialInput<T>) -> Result<Vec<Complex<T>>> {
        let mut out = Vec::with_capacity(input.h.len());
        for (m, y) in input.y.chunks(self.measurements).enumerate() {
            let (dict, op) = &self.dicts[m.min(self.dicts.len() - 1)];
            // stop once the residual reaches the noise floor
            let tol = (input.sigma2 * T::lit(self.measurements as f64)).sqrt();
            let est = omp_with_operator(y, op, dict, self.k_max, tol)?;
            out.extend(est.h_hat);
        }
        Ok(out)
    }
}

impl<T: Real> EstimatorFactory<T> for OmpFactory {
    fn name(&self) -> &str {
        "omp"
    }

    fn prepare(&self, ctx: &PointContext<T>) -> Result<Box<dyn Estimator<T>>> {
        let freqs = if self.carrier_only {
            vec![ctx.geometry.carrier]
        } else {
            crate::channel::subcarrier_frequencies(&ctx.geometry)
        };
        let a = ctx.combiner.to_complex();
        let dicts = freqs
            .par_iter()
            .map(|&f| {
                let d = build_polar_dictionary::<T>(&ctx.geometry, f, &self.grid)?;
                let op = OmpOperator::new(&a, &d)?;
                Ok((d, op))
            })
            .collect::<Result<_>>()?;
        let k_max = self.k_max.unwrap_or(2 * ctx.sampling.paths).clamp(1, ctx.combiner.rows);
        Ok(Box::new(OmpAt {
            dicts,
            k_max,
            measurements: ctx.combiner.rows,
        }))
    }
}

/// Trained unrolled networks, one per measurement count.
pub struct PgdNetFactory<T> {
    pub name: String,
    pub models: Vec<UnrolledModel<T>>,
    /// Combiner each model was trained with, checked against the point.
    pub combiners: Vec<Combiner<T>>,
}

struct PgdNetAt<T> {
    model: UnrolledModel<T>,
    combiner: Combiner<T>,
    layer: Option<usize>,
}

impl<T: Real> Estimator<T> for PgdNetAt<T> {
    fn estimate(&self, input: &TrialInput<T>) -> Result<Vec<Complex<T>>> {
        let p = self.combiner.rows;
        let y = SplitBatch::from_complex(p, input.y.chunks(p))?;
        let traj = self.model.forward(&self.combiner, &y)?;
        let t = self.layer.unwrap_or(self.model.layers());
        let state = traj.states.get(t).ok_or_else(|| {
            Error::Validation(format!("layer {t} exceeds the {} unrolled layers", self.model.layers()))
        })?;
        Ok((0..state.batch).flat_map(|b| state.sample(b)).collect())
    }
}

impl<T: Real> EstimatorFactory<T> for PgdNetFactory<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn prepare(&self, ctx: &PointContext<T>) -> Result<Box<dyn Estimator<T>>> {
        let idx = self
            .combiners
            .iter()
            .position(|c| c.rows == ctx.combiner.rows)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "no {} checkpoint for P·N_RF = {}; train one for this pilot overhead",
                    self.name, ctx.combiner.rows
                ))
            })?;
        if self.combiners[idx] != ctx.combiner {
            return Err(Error::Validation(format!(
                "{} was trained with a different combiner; use the dataset's root seed",
                self.name
            )));
        }
        Ok(Box::new(PgdNetAt {
            model: self.models[idx].clone(),
            combiner: ctx.combiner.clone(),
            layer: ctx.layer,
        }))
    }
}

/// Statistics of one estimator at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub estimator: String,
    pub value: f64,
    /// `10·log10` of the mean linear NMSE.
    pub mean_db: f64,
    /// Spread of the per-trial NMSE in dB.
    pub std_db: f64,
    pub trials: usize,
    pub failures: usize,
    /// Per-trial linear NMSE, `NaN` for failed trials.
    #[serde(skip)]
    pub per_trial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
    /// Per axis value: SHA-256 over every trial input, shared by all
    /// estimators.
    pub input_digests: Vec<String>,
}

impl SweepResult {
    pub fn get(&self, estimator: &str, value: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.estimator == estimator && p.value == value)
    }

    /// One row per estimator, axis value and statistic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,axis,value,statistic,result\n");
        for p in &self.points {
            let stats = [
                ("mean_db", p.mean_db),
                ("std_db", p.std_db),
                ("trials", p.trials as f64),
                ("failures", p.failures as f64),
            ];
            for (name, v) in stats {
                let _ = writeln!(out, "{},{},{},{name},{v}", p.estimator, self.axis.name(), p.value);
            }
        }
        out
    }

    /// `(axis value, mean dB)` per estimator.
    pub fn curves(&self) -> Vec<(String, String)> {
        let mut names: Vec<&str> = Vec::new();
        for p in &self.points {
            if !names.contains(&p.estimator.as_str()) {
                names.push(&p.estimator);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let mut csv = format!("{},nmse_db\n", self.axis.name());
                for p in self.points.iter().filter(|p| p.estimator == name) {
                    let _ = writeln!(csv, "{},{}", p.value, p.mean_db);
                }
                (name.to_string(), csv)
            })
            .collect()
    }
}

/// Runs every estimator on the same fresh realizations at each axis value.
///
/// Trial `i` uses the realization streams of index `i` at every point, so
/// points are paired as well as estimators.
pub fn run_sweep<T: Real>(
    spec: &SweepSpec,
    factories: &[&dyn EstimatorFactory<T>],
    config_hash: &str,
) -> Result<SweepResult> {
    spec.validate()?;
    let chosen: Vec<&dyn EstimatorFactory<T>> = spec
        .estimators
        .iter()
        .map(|name| {
            factories.iter().copied().find(|f| f.name() == name).ok_or_else(|| {
                let known: Vec<&str> = factories.iter().map(|f| f.name()).collect();
                Error::Validation(format!("estimator `{name}` is not registered (available: {})", known.join(", ")))
            })
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    let mut digests = Vec::new();
    for &value in &spec.values {
        let ctx = spec.point::<T>(value)?;
        let prepared: Vec<Box<dyn Estimator<T>>> = chosen.iter().map(|f| f.prepare(&ctx)).collect::<Result<_>>()?;
        let n = ctx.geometry.antennas;
        let trials: Vec<([u8; 32], Vec<Option<f64>>)> = (0..spec.trials)
            .into_par_iter()
            .map(|i| {
                let (h, y, sigma2) =
                    realize(&ctx.geometry, &ctx.sampling, &ctx.combiner, ctx.snr_db, spec.seed, &spec.domain, i as u64)?;
                let input = TrialInput { h, y, sigma2 };
                let digest = input.digest();
                let scores = prepared
                    .iter()
                    .map(|e| match e.estimate(&input) {
                        Ok(h_hat) if h_hat.len() == input.h.len() && h_hat.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => {
                            let mut acc = Nmse::default();
                            acc.push_rows(&h_hat, &input.h, n);
                            Some(acc.linear()).filter(|v| v.is_finite())
                        }
                        Ok(_) => None,
                        Err(err) => {
                            log::warn!("estimator failed on trial {i}: {err}");
                            None
                        }
                    })
                    .collect();
                Ok((digest, scores))
            })
            .collect::<Result<_>>()?;

        let mut hasher = Sha256::new();
        for (d, _) in &trials {
            hasher.update(d);
        }
        digests.push(hex::encode(hasher.finalize()));
        for (k, f) in chosen.iter().enumerate() {
            let per_trial: Vec<f64> = trials.iter().map(|(_, s)| s[k].unwrap_or(f64::NAN)).collect();
            let ok: Vec<f64> = per_trial.iter().copied().filter(|v| v.is_finite()).collect();
            let db: Vec<f64> = ok.iter().map(|&v| to_db(v)).collect();
            let (mean, _) = mean_std(&ok);
            let (_, std_db) = mean_std(&db);
            points.push(SweepPoint {
                estimator: f.name().to_string(),
                value,
                mean_db: to_db(mean),
                std_db: if db.len() > 1 { std_db } else { 0.0 },
                trials: ok.len(),
                failures: spec.trials - ok.len(),
                per_trial,
            });
        }
    }
    Ok(SweepResult {
        axis: spec.axis,
        values: spec.values.clone(),
        seed: spec.seed,
        config_hash: config_hash.to_string(),
        points,
        input_digests: digests,
    })
}

/// NMSE of one estimator over a stored set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub estimator: String,
    pub nmse: Nmse,
    pub nmse_db: f64,
    pub failures: usize,
}

/// Applies each estimator to every realization of `set`. The noise power of
/// each record is recomputed from its channel and SNR.
pub fn evaluate_pairs<T: Real>(
    set: &PairSet<T>,
    ctx: &PointContext<T>,
    factories: &[&dyn EstimatorFactory<T>],
) -> Result<Vec<SetScore>> {
    if set.antennas != ctx.geometry.antennas || set.measurements != ctx.combiner.rows {
        return Err(Error::shape("evaluation set", ctx.combiner.rows, set.measurements));
    }
    let (m, n) = (set.subcarriers, set.antennas);
    factories
        .iter()
        .map(|f| {
            let est = f.prepare(ctx)?;
            let per: Vec<Option<Nmse>> = (0..set.realizations())
                .into_par_iter()
                .map(|r| {
                    let h = set.h[r * m * n..(r + 1) * m * n].to_vec();
                    let y = set.y[r * m * set.measurements..(r + 1) * m * set.measurements].to_vec();
                    let tensor = crate::channel::ChannelTensor::from_rows(m, n, h.clone()).ok()?;
                    let sigma2 = crate::measurement::noise_power(&tensor, &ctx.combiner, set.snr_db[r]);
                    let input = TrialInput { h, y, sigma2 };
                    let h_hat = est.estimate(&input).ok()?;
                    if h_hat.len() != input.h.len() || h_hat.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
                        return None;
                    }
                    let mut acc = Nmse::default();
                    acc.push_rows(&h_hat, &input.h, n);
                    Some(acc)
                })
                .collect();
            let mut total = Nmse::default();
            let mut failures = 0;
            for p in per {
                match p {
                    Some(a) => {
                        total.sum += a.sum;
                        total.count += a.count;
                        total.zero_norm += a.zero_norm;
                    }
                    None => failures += 1,
                }
            }
            Ok(SetScore {
                estimator: f.name().to_string(),
                nmse_db: total.db(),
                nmse: total,
                failures,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Complexity

/// Architecture pieces whose multiply-accumulates can be counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Complexity {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    /// `Aᴴ(A h − y)` for one subcarrier, in complex MACs.
    GradientStep { measurements: usize, antennas: usize },
    /// Full unrolled network for one subcarrier.
    Unrolled {
        layers: usize,
        prox: ProxNetSpec,
        io_shape: IoShape,
        measurements: usize,
    },
    /// Solve with a precomputed `R Aᴴ` and inner matrix, per subcarrier.
    Lmmse { measurements: usize, antennas: usize },
    /// `k` iterations over `atoms` dictionary columns, per subcarrier.
    Omp { measurements: usize, atoms: usize, iterations: usize },
}

/// Multiply-accumulate count. Complex MACs count as 4 real ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub real_macs: u64,
    /// Complex MACs before conversion.
    pub complex_macs: u64,
}

impl MacCount {
    pub fn total_real(&self) -> u64 {
        self.real_macs + 4 * self.complex_macs
    }

    /// One MAC is two FLOPs.
    pub fn flops(&self) -> u64 {
        2 * self.total_real()
    }
}

pub fn count_flops(c: &Complexity) -> Result<MacCount> {
    let real = |real_macs| MacCount { real_macs, complex_macs: 0 };
    let complex = |complex_macs| MacCount { real_macs: 0, complex_macs };
    Ok(match c {
        Complexity::Conv { cin, cout, kernel, height, width } => real((cin * cout * kernel * kernel * height * width) as u64),
        Complexity::GradientStep { measurements, antennas } => complex((2 * measurements * antennas) as u64),
        Complexity::Unrolled { layers, prox, io_shape, measurements } => {
            let net = crate::nn::ProxNet::new(prox)?;
            io_shape.check(io_shape.len(), prox.divisor())?;
            MacCount {
                real_macs: *layers as u64 * net.macs(io_shape.height, io_shape.width),
                complex_macs: (*layers * 2 * measurements * io_shape.len()) as u64,
            }
        }
        Complexity::Lmmse { measurements, antennas } => {
            let (p, n) = (*measurements as u64, *antennas as u64);
            // Cholesky of the inner matrix, two triangular solves, then `R Aᴴ x`
            complex(p * p * p / 6 + p * p + n * p)
        }
        Complexity::Omp { measurements, atoms, iterations } => {
            let (p, g, k) = (*measurements as u64, *atoms as u64, *iterations as u64);
            // correlation plus incremental orthogonalisation per iteration
            complex(k * (p * g + 2 * p * k))
        }
    })
}

// ---------------------------------------------------------------------------
// Beam split

/// Polar spectrum of one path at selected subcarriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSplitTrace {
    pub coverage: f64,
    pub subcarriers: Vec<usize>,
    /// `|Dᴴ h_m|` per listed subcarrier.
    pub spectrum: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
    pub peak: Vec<f64>,
}

/// Single-path channels with centred visibility blocks at the given
/// coverage rates, a shared random angle and distance, and unit gains.
pub fn beam_split_paths(geom: &ArrayGeometry, coverage: &[f64], distance: (f64, f64), theta: (f64, f64), rng: &mut StreamRng) -> Result<Vec<Path<f64>>> {
    use rand::Rng;
    let r = rng.random_range(distance.0..distance.1);
    let th = rng.random_range(theta.0..theta.1);
    coverage
        .iter()
        .map(|&c| {
            let visibility = match geom.kind {
                ArrayKind::Ula => {
                    let len = ((c * geom.antennas as f64).round() as usize).clamp(1, geom.antennas);
                    Visibility::block(geom.antennas, (geom.antennas - len) / 2, len)?
                }
                ArrayKind::Upa { n1, n2 } => {
                    let s = c.sqrt();
                    let l1 = ((s * n1 as f64).round() as usize).clamp(1, n1);
                    let l2 = ((s * n2 as f64).round() as usize).clamp(1, n2);
                    Visibility::rect(n1, n2, ((n1 - l1) / 2, (n2 - l2) / 2), (l1, l2))?
                }
            };
            Ok(Path {
                gains: vec![Complex::new(1.0, 0.0); geom.subcarriers],
                theta: th,
                phi: 0.0,
                distance: r,
                visibility,
            })
        })
        .collect()
}

/// Projects each path's channel at the listed subcarriers onto a polar
/// dictionary built at the carrier frequency.
pub fn beam_split(geom: &ArrayGeometry, paths: &[Path<f64>], coverage: &[f64], subcarriers: &[usize], grid: &PolarGrid) -> Result<Vec<BeamSplitTrace>> {
    if paths.len() != coverage.len() {
        return Err(Error::shape("coverage list", paths.len(), coverage.len()));
    }
    if let Some(&m) = subcarriers.iter().find(|&&m| m >= geom.subcarriers) {
        return Err(Error::Validation(format!("subcarrier {m} out of range 0..{}", geom.subcarriers)));
    }
    let dict = build_polar_dictionary::<f64>(geom, geom.carrier, grid)?;
    paths
        .iter()
        .zip(coverage)
        .map(|(p, &c)| {
            let h = synthesize_channel(geom, &PathSet { paths: vec![p.clone()] })?;
            let mut trace = BeamSplitTrace {
                coverage: c,
                subcarriers: subcarriers.to_vec(),
                spectrum: Vec::new(),
                argmax: Vec::new(),
                peak: Vec::new(),
            };
            for &m in subcarriers {
                let mags: Vec<f64> = polar_projection(h.row(m), &dict)?.iter().map(|z| z.norm()).collect();
                let (arg, peak) = mags
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::MIN), |best, (i, v)| if v > best.1 { (i, v) } else { best });
                trace.spectrum.push(mags);
                trace.argmax.push(arg);
                trace.peak.push(peak);
            }
            Ok(trace)
        })
        .collect()
}
