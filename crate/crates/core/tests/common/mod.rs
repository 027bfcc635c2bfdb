#![allow(dead_code)]

use num_complex::Complex64;

/// Double-double value `hi + lo`, enough precision that the oracle's own
/// rounding sits far below the 1e-12 bound.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let lo = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Dd { hi: s, lo: lo - (s - hi) }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        Dd::norm(s.hi, s.lo + self.lo + o.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        Dd::norm(p.hi, p.lo + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::new(q)));
        let q2 = r.hi / o.hi;
        Dd::norm(q, q2)
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::new(0.0);
        }
        // one Newton step from the f64 root doubles the precision
        let x = Dd::new(self.hi.sqrt());
        x.add(self.sub(x.mul(x)).div(x.add(x)))
    }

    pub fn f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Brute-force steering entry for an element at `p` and a scatterer at
/// `r·u`, where `u` is taken as exactly unit length.
pub fn oracle_entry(p: [f64; 3], r: f64, u: [Dd; 3], k: f64, scale: f64) -> Complex64 {
    let rr = Dd::new(r);
    let mut sq = Dd::new(0.0);
    for i in 0..3 {
        let d = rr.mul(u[i]).sub(Dd::new(p[i]));
        sq = sq.add(d.mul(d));
    }
    let dr = sq.sqrt().sub(rr).f64();
    Complex64::from_polar(scale, -k * dr)
}

/// Completes `(·, b, c)` to a unit vector in double-double.
pub fn unit_from(b: f64, c: f64) -> [Dd; 3] {
    let (b, c) = (Dd::new(b), Dd::new(c));
    let a = Dd::new(1.0).sub(b.mul(b)).sub(c.mul(c)).sqrt();
    [a, b, c]
}

pub fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

use rand::seq::index::sample;
use rand::Rng;
use xlu_core::estimators::pgd::{pgd_estimate, IdentityProx, PgdInit};
use xlu_core::linalg::Matrix;
use xlu_core::measurement::make_combiner;
use xlu_core::nn::ProxNetSpec;
use xlu_core::rng::{complex_normal, normal, stream, StreamRng};
use xlu_core::training::{empirical_lagrangian, lagrangian_terms, DualState, LossKind};
use xlu_core::unrolled::{IoShape, NoiseSchedule, SplitBatch, StartPoint, UnrolledConfig, UnrolledModel};

pub fn tiny_prox() -> ProxNetSpec {
    ProxNetSpec {
        scales: 2,
        base_channels: 4,
        multipliers: vec![1, 2],
        residual_blocks: 1,
    }
}

pub fn config(layers: usize, io: IoShape) -> UnrolledConfig {
    UnrolledConfig {
        layers,
        prox: tiny_prox(),
        io_shape: io,
        start: StartPoint::MatchedFilter,
        input_scale: (io.len() as f64).sqrt(),
        tied: false,
    }
}

fn batch(len: usize, rows: &[Vec<Complex64>]) -> SplitBatch<f64> {
    SplitBatch::from_complex(len, rows.iter().map(|v| v.as_slice())).unwrap()
}

/// Largest gap between the unrolled identity-prox trajectory and classical
/// PGD over `instances` random `16 x 32` problems.
pub fn pgd_equivalence_gap(instances: usize, layers: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = stream(seed, "pgd-equivalence", i as u64);
        let a: Matrix<f64> = make_combiner(32, 4, 4, &mut rng).unwrap();
        let ac = a.to_complex();
        let alpha = rng.random_range(0.2..1.0) / ac.spectral_norm_sqr();
        let h: Vec<Complex64> = (0..32).map(|_| complex_normal(&mut rng)).collect();
        let y: Vec<Complex64> = ac.matvec(&h).iter().map(|z| z + complex_normal::<f64, _>(&mut rng) * 0.1).collect();
        let model = UnrolledModel::<f64>::identity(config(layers, IoShape { height: 4, width: 8 }), alpha).unwrap();
        let traj = model.forward(&a, &batch(16, &[y.clone()])).unwrap();
        let pgd = pgd_estimate(&y, &ac, &IdentityProx, alpha, layers, PgdInit::MatchedFilter).unwrap();
        for (t, want) in pgd.trajectory.iter().enumerate() {
            let got = traj.states[t + 1].sample(0);
            for (p, q) in got.iter().zip(want) {
                worst = worst.max((p.re - q.re).abs()).max((p.im - q.im).abs());
            }
        }
    }
    worst
}

#[derive(Debug)]
pub struct GradCheck {
    pub alpha_worst: f64,
    pub prox_worst: f64,
    pub prox_checked: usize,
    pub prox_total: usize,
}

fn rel(g: f64, fd: f64) -> f64 {
    let scale = g.abs().max(fd.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (g - fd).abs() / scale
    }
}

/// Backpropagated Lagrangian gradients against central differences for a
/// 2-layer model on N = 16, with active multipliers and the normalized loss.
pub fn gradient_check(seed: u64, fraction: f64) -> GradCheck {
    let mut rng: StreamRng = stream(seed, "grad-check", 0);
    let io = IoShape { height: 4, width: 4 };
    let a: Matrix<f64> = make_combiner(16, 2, 4, &mut rng).unwrap();
    let mut model = UnrolledModel::<f64>::new(config(2, io), 0.5 / a.to_complex().spectral_norm_sqr(), &mut rng).unwrap();
    for p in model.params[2..].iter_mut() {
        *p += 0.05 * normal::<f64, _>(&mut rng);
    }
    let hs: Vec<Vec<Complex64>> = (0..3).map(|_| (0..16).map(|_| complex_normal(&mut rng)).collect()).collect();
    let ys: Vec<Vec<Complex64>> = hs
        .iter()
        .map(|h| a.to_complex().matvec(h).iter().map(|z| z + complex_normal::<f64, _>(&mut rng) * 0.05).collect())
        .collect();
    let (y, truth) = (batch(8, &ys), batch(16, &hs));
    let mut dual = DualState::new(2, 0.05, 0.0).unwrap();
    dual.lambda = vec![0.7, 1.3];
    let loss = LossKind::Normalized;
    let value = |m: &UnrolledModel<f64>| {
        empirical_lagrangian(m, &a, &y, &truth, Some(&dual), loss, None::<(&NoiseSchedule, &mut StreamRng)>)
            .unwrap()
            .value
    };
    let (traj, tape) = model.forward_train(&a, &y, None::<(&NoiseSchedule, &mut StreamRng)>).unwrap();
    let (_, dstates) = lagrangian_terms(&traj, &truth, Some(&dual), loss);
    let grad = model.backward(&a, &tape, &dstates).unwrap();
    let fd = |idx: usize| {
        let eps = 1e-6;
        let mut mp = model.clone();
        mp.params[idx] += eps;
        let mut mm = model.clone();
        mm.params[idx] -= eps;
        (value(&mp) - value(&mm)) / (2.0 * eps)
    };
    let layers = model.layers();
    let alpha_worst = (0..layers).map(|i| rel(grad[i], fd(i))).fold(0.0, f64::max);
    let prox_total = model.params.len() - layers;
    let count = ((prox_total as f64 * fraction).ceil() as usize).max(1);
    let picks = sample(&mut rng, prox_total, count);
    let prox_worst = picks.iter().map(|j| rel(grad[layers + j], fd(layers + j))).fold(0.0, f64::max);
    GradCheck {
        alpha_worst,
        prox_worst,
        prox_checked: count,
        prox_total,
    }
}

use xlu_core::channel::{ArrayGeometry, PathSampling};
use xlu_core::data::{generate, DatasetHeader, PairSet, Split};

pub fn small_header(split: Split, samples: usize) -> DatasetHeader {
    DatasetHeader {
        geometry: ArrayGeometry::ula(16, 100e9, 10e9, 4).unwrap(),
        pilots: 2,
        rf_chains: 4,
        snr_db: vec![10.0],
        split,
        samples,
        root_seed: 21,
        config_hash: [0; 32],
    }
}

pub fn small_sampling() -> PathSampling {
    PathSampling {
        paths: 2,
        distance: (5.0, 30.0),
        theta: (-1.0, 1.0),
        phi: (0.0, 0.0),
        coverage: vec![0.5, 1.0],
    }
}

pub fn small_sets() -> (PairSet<f32>, PairSet<f32>, Matrix<f32>) {
    let train = generate::<f32>(&small_header(Split::Train, 12), &small_sampling()).unwrap();
    let val = generate::<f32>(&small_header(Split::Val, 4), &small_sampling()).unwrap();
    let a = small_header(Split::Train, 12).combiner::<f32>().unwrap();
    (train, val, a)
}

use xlu_core::estimators::PolarGrid;
use xlu_core::eval::{beam_split, beam_split_paths, BeamSplitTrace};

pub const FIG4_COVERAGE: [f64; 3] = [0.25, 0.5, 1.0];

/// Single-path spectra at the first and last subcarrier of a 128-element
/// array with `B/f_c = 0.1`.
pub fn fig4(seed: u64) -> Vec<BeamSplitTrace> {
    let geom = ArrayGeometry::ula(128, 100e9, 10e9, 32).unwrap();
    let mut rng = stream(seed, "beam-split", 0);
    let paths = beam_split_paths(&geom, &FIG4_COVERAGE, (5.0, 30.0), (0.4, 1.0), &mut rng).unwrap();
    beam_split(&geom, &paths, &FIG4_COVERAGE, &[0, 31], &PolarGrid::standard(5.0, 30.0, 10)).unwrap()
}
