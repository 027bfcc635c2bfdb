//! Primal-dual training under layer-wise descent constraints.
//!
//! Every layer must shrink the distance to the true channel:
//! `C_t = ‖h_t − h‖ − (1 − ε)‖h_{t−1} − h‖ ≤ 0`. The empirical Lagrangian
//! `L = E[ℓ(h_T, h)] + Σ_t λ_t E[C_t]` is minimized over the network weights
//! and maximized over `λ ≥ 0`, alternating one step of each per batch.

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::eval::{layer_errors, LayerErrors};
use crate::linalg::Matrix;
use crate::rng::StreamRng;
use crate::scalar::Real;
use crate::unrolled::{NoiseSchedule, SplitBatch, Trajectory, UnrolledModel};

/// `‖h_t − h‖ − (1 − ε)‖h_{t−1} − h‖`.
pub fn constraint_value<T: Real>(h_t: &[Complex<T>], h_prev: &[Complex<T>], h_true: &[Complex<T>], epsilon: f64) -> f64 {
    let dist = |a: &[Complex<T>]| a.iter().zip(h_true).map(|(p, q)| (p - q).norm_sqr().as_f64()).sum::<f64>().sqrt();
    dist(h_t) - (1.0 - epsilon) * dist(h_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub epsilon: f64,
    pub step: f64,
}

impl DualState {
    pub fn new(layers: usize, epsilon: f64, step: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Validation(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        if !(step >= 0.0 && step.is_finite()) {
            return Err(Error::Validation(format!("dual step must be non-negative, got {step}")));
        }
        Ok(DualState {
            lambda: vec![0.0; layers],
            epsilon,
            step,
        })
    }

    /// `λ_t ← max(0, λ_t + μ_λ Ĉ_t)`.
    pub fn dual_step(&mut self, constraints: &[f64]) {
        for (l, &c) in self.lambda.iter_mut().zip(constraints) {
            *l = (*l + self.step * c).max(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `‖h_T − h‖²`.
    Squared,
    /// `‖h_T − h‖² / ‖h‖²`.
    #[default]
    Normalized,
}

/// Value of the empirical Lagrangian on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianValue {
    pub value: f64,
    pub loss: f64,
    /// Batch-mean `Ĉ_t` per layer.
    pub constraints: Vec<f64>,
}

fn distances<T: Real>(s: &SplitBatch<T>, truth: &SplitBatch<T>) -> Vec<f64> {
    (0..s.batch)
        .map(|b| {
            (0..2)
                .map(|p| s.part(p, b).iter().zip(truth.part(p, b)).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Evaluates `L̂` on a forward trajectory and returns it with
/// `∂L̂/∂h_t` for `t = 1..T`.
pub fn lagrangian_terms<T: Real>(
    traj: &Trajectory<T>,
    truth: &SplitBatch<T>,
    dual: Option<&DualState>,
    loss: LossKind,
) -> (LagrangianValue, Vec<SplitBatch<T>>) {
    let layers = traj.states.len() - 1;
    let batch = truth.batch;
    let inv_b = 1.0 / batch as f64;
    let dist: Vec<Vec<f64>> = traj.states.iter().map(|s| distances(s, truth)).collect();
    let energy: Vec<f64> = (0..batch).map(|b| truth.norm_sqr(b).as_f64()).collect();
    let weight = |b: usize| match loss {
        LossKind::Squared => 1.0,
        LossKind::Normalized => 1.0 / energy[b].max(f64::MIN_POSITIVE),
    };

    let mut grads: Vec<SplitBatch<T>> = (0..layers).map(|_| SplitBatch::zeros(batch, truth.len)).collect();
    let mut loss_value = 0.0;
    if layers > 0 {
        let last = &traj.states[layers];
        for b in 0..batch {
            let w = weight(b);
            loss_value += w * dist[layers][b].powi(2) * inv_b;
            let scale = T::lit(2.0 * w * inv_b);
            add_scaled_difference(&mut grads[layers - 1], last, truth, b, scale);
        }
    } else {
        loss_value = (0..batch).map(|b| weight(b) * dist[0][b].powi(2)).sum::<f64>() * inv_b;
    }

    let epsilon = dual.map_or(0.0, |d| d.epsilon);
    let constraints: Vec<f64> = (1..=layers)
        .map(|t| (0..batch).map(|b| dist[t][b] - (1.0 - epsilon) * dist[t - 1][b]).sum::<f64>() * inv_b)
        .collect();
    let mut value = loss_value;
    if let Some(d) = dual {
        for t in 1..=layers {
            let lambda = d.lambda[t - 1];
            if lambda == 0.0 {
                continue;
            }
            value += lambda * constraints[t - 1];
            for b in 0..batch {
                if dist[t][b] > 0.0 {
                    let s = T::lit(lambda * inv_b / dist[t][b]);
                    add_scaled_difference(&mut grads[t - 1], &traj.states[t], truth, b, s);
                }
                if t >= 2 && dist[t - 1][b] > 0.0 {
                    let s = T::lit(-lambda * (1.0 - epsilon) * inv_b / dist[t - 1][b]);
                    add_scaled_difference(&mut grads[t - 2], &traj.states[t - 1], truth, b, s);
                }
            }
        }
    }
    (
        LagrangianValue {
            value,
            loss: loss_value,
            constraints,
        },
        grads,
    )
}

/// `g[b] += s · (x[b] − truth[b])`.
fn add_scaled_difference<T: Real>(g: &mut SplitBatch<T>, x: &SplitBatch<T>, truth: &SplitBatch<T>, b: usize, s: T) {
    let (batch, len) = (g.batch, g.len);
    for p in 0..2 {
        let off = (p * batch + b) * len;
        for i in off..off + len {
            g.data[i] += s * (x.data[i] - truth.data[i]);
        }
    }
}

/// `L̂` on one batch with noise injection as configured.
pub fn empirical_lagrangian<T: Real, R: Rng + ?Sized>(
    model: &UnrolledModel<T>,
    a: &Matrix<T>,
    y: &SplitBatch<T>,
    truth: &SplitBatch<T>,
    dual: Option<&DualState>,
    loss: LossKind,
    noise: Option<(&NoiseSchedule, &mut R)>,
) -> Result<LagrangianValue> {
    if truth.batch == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let (traj, _) = model.forward_train(a, y, noise)?;
    Ok(lagrangian_terms(&traj, truth, dual, loss).0)
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.steps += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let lr = T::lit(self.learning_rate * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * *m / (v.sqrt() + eps);
        }
    }
}

/// Applies one optimizer step unless the gradient is non-finite; returns
/// whether the step was taken.
pub fn primal_step<T: Real>(model: &mut UnrolledModel<T>, grad: &[T], opt: &mut Adam<T>) -> bool {
    if grad.iter().any(|g| !g.is_finite()) {
        return false;
    }
    opt.step(&mut model.params, grad);
    true
}

/// Plain gradient descent `W ← W − μ ∇W`, the reference form of the
/// primal update.
pub fn sgd_step<T: Real>(params: &mut [T], grad: &[T], mu: f64) {
    let mu = T::lit(mu);
    params.iter_mut().zip(grad).for_each(|(p, &g)| *p -= mu * g);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero over the configured epochs.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    /// `σ₀²` relative to `mean‖h‖²/N`.
    pub relative: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Realizations per batch; each contributes all of its subcarriers.
    pub batch_realizations: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub loss: LossKind,
    pub epsilon: f64,
    pub dual_step: f64,
    /// λ frozen at zero.
    pub unconstrained: bool,
    pub noise: Option<InjectionConfig>,
    /// Consecutive epochs past `divergence_margin_db` before stopping.
    pub patience: usize,
    pub divergence_margin_db: f64,
    /// Keep every dual update in the report.
    #[serde(default)]
    pub trace_dual: bool,
    /// Random global phase and conjugation per training pair.
    #[serde(default)]
    pub augment: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 40,
            batch_realizations: 1,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            loss: LossKind::Normalized,
            epsilon: 0.05,
            dual_step: 1e-2,
            unconstrained: false,
            noise: Some(InjectionConfig { relative: 1e-2, gamma: 0.5 }),
            patience: 10,
            divergence_margin_db: 1.0,
            trace_dual: false,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.batch_realizations == 0 {
            return bad("batch_realizations must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.dual_step >= 0.0) {
            return bad(format!("dual_step must be non-negative, got {}", self.dual_step));
        }
        if let Some(n) = &self.noise {
            if !(n.relative >= 0.0) || !(n.gamma > 0.0 && n.gamma < 1.0) {
                return bad("noise needs relative >= 0 and 0 < gamma < 1".into());
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let x = epoch as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

/// One dual update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTrace {
    pub before: Vec<f64>,
    pub constraints: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub lagrangian: f64,
    /// Epoch-mean `Ĉ_t`.
    pub constraints: Vec<f64>,
    /// λ at the end of the epoch.
    pub lambda: Vec<f64>,
    /// Validation NMSE (dB) of `h_0 .. h_T`.
    pub val_nmse_db: Vec<f64>,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_nmse_db: Option<f64>,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dual_trace: Vec<DualTrace>,
}

impl TrainReport {
    /// One row per epoch.
    pub fn to_csv(&self) -> String {
        let layers = self.epochs.first().map_or(0, |e| e.lambda.len());
        let mut out = String::from("epoch,learning_rate,loss,lagrangian,skipped_steps");
        for t in 1..=layers {
            out += &format!(",constraint_{t},lambda_{t}");
        }
        for t in 0..=layers {
            out += &format!(",val_nmse_db_{t}");
        }
        out.push('\n');
        for e in &self.epochs {
            out += &format!("{},{},{},{},{}", e.epoch, e.learning_rate, e.loss, e.lagrangian, e.skipped_steps);
            for (c, l) in e.constraints.iter().zip(&e.lambda) {
                out += &format!(",{c},{l}");
            }
            for v in &e.val_nmse_db {
                out += &format!(",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Applies `z ↦ e^{jφ}z` and, with probability 1/2, conjugation to each
/// `(y, h)` row pair. Both maps commute with a real combiner.
pub fn augment_pairs<T: Real, R: Rng + ?Sized>(y: &mut SplitBatch<T>, h: &mut SplitBatch<T>, rng: &mut R) {
    let apply = |s: &mut SplitBatch<T>, b: usize, c: T, sn: T, conj: bool| {
        let (re, im) = s.data.split_at_mut(s.batch * s.len);
        for i in b * s.len..(b + 1) * s.len {
            let (x, mut v) = (re[i], im[i]);
            if conj {
                v = -v;
            }
            re[i] = c * x - sn * v;
            im[i] = sn * x + c * v;
        }
    };
    for b in 0..y.batch.min(h.batch) {
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let conj: bool = rng.random();
        let (c, sn) = (T::lit(phi.cos()), T::lit(phi.sin()));
        apply(y, b, c, sn, conj);
        apply(h, b, c, sn, conj);
    }
}

/// Training inputs that stay fixed across epochs.
pub struct TrainSetup<'a, T> {
    pub train: &'a PairSet<T>,
    pub val: &'a PairSet<T>,
    pub combiner: &'a Matrix<T>,
    /// Epoch numbering starts here (for resumed runs).
    pub first_epoch: usize,
}

/// Runs the primal-dual loop and returns the best-validation model.
///
/// `on_epoch` sees every epoch record together with the current weights and
/// the dual state.
pub fn train<T: Real>(
    setup: &TrainSetup<'_, T>,
    mut model: UnrolledModel<T>,
    mut dual: DualState,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
    mut on_epoch: impl FnMut(&EpochRecord, &UnrolledModel<T>, &DualState) -> Result<()>,
) -> Result<(UnrolledModel<T>, TrainReport)> {
    cfg.validate()?;
    if setup.train.realizations() == 0 || setup.val.realizations() == 0 {
        return Err(Error::Validation("training and validation sets must be non-empty".into()));
    }
    if dual.lambda.len() != model.layers() {
        return Err(Error::shape("dual variables", model.layers(), dual.lambda.len()));
    }
    if cfg.unconstrained {
        dual.lambda.fill(0.0);
    }
    let a = setup.combiner;
    let schedule = cfg
        .noise
        .map(|n| NoiseSchedule::relative(setup.train.mean_energy(), setup.train.antennas, n.relative, n.gamma));
    let mut opt = Adam::new(model.params.len(), cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, UnrolledModel<T>)> = None;
    let mut worse_streak = 0;
    let mut order: Vec<usize> = (0..setup.train.realizations()).collect();

    for e in 0..cfg.epochs {
        let epoch = setup.first_epoch + e;
        opt.learning_rate = cfg.lr_at(e);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut lag_sum = 0.0;
        let mut c_sum = vec![0.0; model.layers()];
        let mut batches = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(cfg.batch_realizations) {
            let (mut y, mut h) = setup.train.batch(chunk)?;
            if cfg.augment {
                augment_pairs(&mut y, &mut h, rng);
            }
            let noise = schedule.as_ref().map(|s| (s, &mut *rng));
            let (traj, tape) = model.forward_train(a, &y, noise)?;
            let active = (!cfg.unconstrained).then_some(&dual);
            let (value, dstates) = lagrangian_terms(&traj, &h, active, cfg.loss);
            let grad = model.backward(a, &tape, &dstates)?;
            if primal_step(&mut model, &grad, &mut opt) {
                if !cfg.unconstrained {
                    // constraint values after the primal update
                    let post = model.forward(a, &y)?;
                    let (after, _) = lagrangian_terms(&post, &h, Some(&dual), cfg.loss);
                    let before = dual.lambda.clone();
                    dual.dual_step(&after.constraints);
                    if cfg.trace_dual {
                        report.dual_trace.push(DualTrace {
                            before,
                            constraints: after.constraints.clone(),
                            after: dual.lambda.clone(),
                        });
                    }
                }
            } else {
                skipped += 1;
                log::warn!("epoch {epoch}: skipped a step with a non-finite gradient");
            }
            loss_sum += value.loss;
            lag_sum += value.value;
            c_sum.iter_mut().zip(&value.constraints).for_each(|(s, c)| *s += c);
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let val = layer_errors(&model, setup.val, a)?;
        let record = EpochRecord {
            epoch,
            learning_rate: opt.learning_rate,
            loss: loss_sum / nb,
            lagrangian: lag_sum / nb,
            constraints: c_sum.iter().map(|c| c / nb).collect(),
            lambda: dual.lambda.clone(),
            val_nmse_db: val.mean_db(),
            skipped_steps: skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val NMSE {:.2} dB lambda {:?}",
            record.loss,
            record.val_nmse_db.last().copied().unwrap_or(f64::NAN),
            record.lambda
        );
        on_epoch(&record, &model, &dual)?;
        let final_db = *record.val_nmse_db.last().expect("h0 is always evaluated");
        report.epochs.push(record);
        match &best {
            Some((b, _)) if final_db >= *b => {
                if final_db > *b + cfg.divergence_margin_db {
                    worse_streak += 1;
                } else {
                    worse_streak = 0;
                }
            }
            _ => {
                best = Some((final_db, model.clone()));
                report.best_epoch = Some(epoch);
                report.best_val_nmse_db = Some(final_db);
                worse_streak = 0;
            }
        }
        if worse_streak >= cfg.patience {
            log::warn!("validation NMSE worsened for {worse_streak} epochs; stopping early");
            report.stopped_early = true;
            break;
        }
    }
    let model = best.map_or(model, |(_, m)| m);
    Ok((model, report))
}

/// Per-layer validation errors; re-exported for callers that only need the
/// training-side view.
pub fn validation_errors<T: Real>(model: &UnrolledModel<T>, set: &PairSet<T>, a: &Matrix<T>) -> Result<LayerErrors> {
    layer_errors(model, set, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ProxNetSpec;
    use crate::rng::stream;
    use crate::unrolled::{IoShape, StartPoint, UnrolledConfig};

    fn c(v: &[f64]) -> Vec<Complex<f64>> {
        v.iter().map(|&x| Complex::new(x, 0.0)).collect()
    }

    #[test]
    fn constraint_examples() {
        let h = c(&[1.0, 2.0]);
        let prev = c(&[1.0, 3.0]);
        assert!((constraint_value(&h, &prev, &h, 0.05) + 0.95).abs() < 1e-12);
        assert_eq!(constraint_value(&prev, &prev, &h, 0.0), 0.0);
        let ht = c(&[1.0, 2.9]);
        assert!((constraint_value(&ht, &prev, &h, 0.05) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn dual_step_examples() {
        let mut d = DualState::new(3, 0.05, 1.0).unwrap();
        d.lambda = vec![0.1, 0.3, 0.0];
        d.dual_step(&[-0.2, 0.0, 0.0]);
        assert_eq!(d.lambda, vec![0.0, 0.3, 0.0]);
        let mut d = DualState::new(1, 0.05, 0.5).unwrap();
        d.dual_step(&[0.4]);
        assert_eq!(d.lambda, vec![0.2]);
        assert!(DualState::new(1, 0.0, 0.5).is_err());
    }

    fn tiny_config(layers: usize) -> UnrolledConfig {
        UnrolledConfig {
            layers,
            prox: ProxNetSpec {
                scales: 2,
                base_channels: 2,
                multipliers: vec![1, 2],
                residual_blocks: 1,
            },
            io_shape: IoShape { height: 2, width: 4 },
            start: StartPoint::MatchedFilter,
            input_scale: 1.0,
            tied: false,
        }
    }

    fn tiny_problem(batch: usize, seed: u64) -> (Matrix<f64>, SplitBatch<f64>, SplitBatch<f64>) {
        let mut rng = stream(seed, "tiny", 0);
        let a = crate::measurement::make_combiner::<f64, _>(8, 6, 1, &mut rng).unwrap();
        let h: Vec<Vec<Complex<f64>>> =
            (0..batch).map(|_| (0..8).map(|_| crate::rng::complex_normal(&mut rng)).collect()).collect();
        let y: Vec<Vec<Complex<f64>>> = h
            .iter()
            .map(|h| crate::measurement::apply_combiner(&a, h).into_iter().map(|z| z + crate::rng::complex_normal::<f64, _>(&mut rng) * 0.1).collect())
            .collect();
        let hb = SplitBatch::from_complex(8, h.iter().map(|v| v.as_slice())).unwrap();
        let yb = SplitBatch::from_complex(6, y.iter().map(|v| v.as_slice())).unwrap();
        (a, yb, hb)
    }

    #[test]
    fn lagrangian_is_linear_in_lambda_and_matches_per_sample_sum() {
        let (a, y, h) = tiny_problem(2, 3);
        let model = UnrolledModel::<f64>::new(tiny_config(2), 0.3, &mut stream(1, "init", 0)).unwrap();
        let traj = model.forward(&a, &y).unwrap();
        let zero = DualState::new(2, 0.05, 0.1).unwrap();
        let mut dual = zero.clone();
        dual.lambda = vec![0.7, 1.3];
        let (base, _) = lagrangian_terms(&traj, &h, Some(&zero), LossKind::Squared);
        let (full, _) = lagrangian_terms(&traj, &h, Some(&dual), LossKind::Squared);
        let shift: f64 = dual.lambda.iter().zip(&full.constraints).map(|(l, c)| l * c).sum();
        assert!((full.value - base.value - shift).abs() < 1e-12);

        // brute force over the two samples
        let mut expect = 0.0;
        for b in 0..2 {
            let s: Vec<Vec<Complex<f64>>> = traj.states.iter().map(|s| s.sample(b)).collect();
            let truth = h.sample(b);
            let loss: f64 = s[2].iter().zip(&truth).map(|(p, q)| (p - q).norm_sqr()).sum();
            let cons = (1..=2).map(|t| dual.lambda[t - 1] * constraint_value(&s[t], &s[t - 1], &truth, 0.05)).sum::<f64>();
            expect += (loss + cons) / 2.0;
        }
        assert!((full.value - expect).abs() < 1e-10);
    }

    #[test]
    fn lagrangian_state_gradients_match_finite_differences() {
        let (a, y, h) = tiny_problem(2, 5);
        let model = UnrolledModel::<f64>::new(tiny_config(3), 0.3, &mut stream(2, "init", 0)).unwrap();
        let traj = model.forward(&a, &y).unwrap();
        let mut dual = DualState::new(3, 0.05, 0.1).unwrap();
        dual.lambda = vec![0.4, 0.9, 0.2];
        for loss in [LossKind::Squared, LossKind::Normalized] {
            let (_, grads) = lagrangian_terms(&traj, &h, Some(&dual), loss);
            for t in 1..=3 {
                for i in [0, 5, 17, 30] {
                    let eps = 1e-6;
                    let mut plus = traj.clone();
                    plus.states[t].data[i] += eps;
                    let mut minus = traj.clone();
                    minus.states[t].data[i] -= eps;
                    let fd = (lagrangian_terms(&plus, &h, Some(&dual), loss).0.value
                        - lagrangian_terms(&minus, &h, Some(&dual), loss).0.value)
                        / (2.0 * eps);
                    let g = grads[t - 1].data[i];
                    assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "t={t} i={i}: {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_nonfinite_is_skipped() {
        let mut model = UnrolledModel::<f64>::new(tiny_config(1), 0.3, &mut stream(1, "init", 0)).unwrap();
        let before = model.params.clone();
        let mut opt = Adam::new(before.len(), 1e-3);
        assert!(primal_step(&mut model, &vec![0.0; before.len()], &mut opt));
        assert_eq!(model.params, before);
        let mut bad = vec![0.0; before.len()];
        bad[3] = f64::NAN;
        assert!(!primal_step(&mut model, &bad, &mut opt));
        assert_eq!(model.params, before);
    }

    #[test]
    fn gradient_step_on_quadratic() {
        // f(w) = c/2 w², one step shrinks f iff μ < 2/c
        let c = 4.0;
        for (mu, shrinks) in [(0.1, true), (0.49, true), (0.51, false)] {
            let mut w = [1.0f64];
            let g = [c * w[0]];
            sgd_step(&mut w, &g, mu);
            assert_eq!(w[0].abs() < 1.0, shrinks, "mu = {mu}");
        }
        // linear toy layer: loss = g·W, ∇ = g
        let mut w = [0.5f64, -1.0];
        sgd_step(&mut w, &[2.0, -3.0], 0.1);
        assert_eq!(w, [0.5 - 0.2, -1.0 + 0.3]);
    }
}
