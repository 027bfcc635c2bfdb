//! Deep-unrolled proximal gradient descent.
//!
//! Layer `t` takes a gradient step on `½‖y − Ah‖²` with a learned step size
//! and then applies its own residual U-Net as the proximal map.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ArrayGeometry, ArrayKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Feature, ProxCache, ProxNet, ProxNetSpec};
use crate::rng::normal;
use crate::scalar::Real;

/// Spatial arrangement of the `N` antennas on the 2-D grid seen by the
/// proximal network. Antenna `n` sits at `(n / width, n % width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoShape {
    pub height: usize,
    pub width: usize,
}

impl IoShape {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// ULA: the most square factorization `height ≤ width` with both factors
    /// divisible by `divisor`. UPA: the physical panel `N1 x N2`.
    pub fn for_geometry(geom: &ArrayGeometry, divisor: usize) -> Result<Self> {
        let shape = match geom.kind {
            ArrayKind::Upa { n1, n2 } => IoShape { height: n1, width: n2 },
            ArrayKind::Ula => {
                let n = geom.antennas;
                let mut best = None;
                let mut h = 1;
                while h * h <= n {
                    if n % h == 0 && h % divisor == 0 && (n / h) % divisor == 0 {
                        best = Some(IoShape { height: h, width: n / h });
                    }
                    h += 1;
                }
                best.ok_or_else(|| {
                    Error::Validation(format!(
                        "{n} antennas have no factorization with both sides divisible by {divisor}; set io_shape explicitly"
                    ))
                })?
            }
        };
        shape.check(geom.antennas, divisor)?;
        Ok(shape)
    }

    pub fn check(&self, antennas: usize, divisor: usize) -> Result<()> {
        if self.len() != antennas || self.height % divisor != 0 || self.width % divisor != 0 {
            return Err(Error::Validation(format!(
                "io_shape {}x{} does not tile {antennas} antennas with sides divisible by {divisor}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Real/imaginary split of `batch` complex vectors of length `len`,
/// stored `[part][sample][index]`. As a matrix it has `2·batch` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBatch<T> {
    pub batch: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Real> SplitBatch<T> {
    pub fn zeros(batch: usize, len: usize) -> Self {
        SplitBatch {
            batch,
            len,
            data: vec![T::zero(); 2 * batch * len],
        }
    }

    pub fn from_complex<'a>(len: usize, rows: impl IntoIterator<Item = &'a [Complex<T>]>) -> Result<Self> {
        let rows: Vec<_> = rows.into_iter().collect();
        let batch = rows.len();
        let mut out = Self::zeros(batch, len);
        for (b, r) in rows.iter().enumerate() {
            if r.len() != len {
                return Err(Error::shape("batch row", len, r.len()));
            }
            for (i, z) in r.iter().enumerate() {
                out.data[b * len + i] = z.re;
                out.data[(batch + b) * len + i] = z.im;
            }
        }
        Ok(out)
    }

    pub fn sample(&self, b: usize) -> Vec<Complex<T>> {
        let (re, im) = (self.part(0, b), self.part(1, b));
        re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect()
    }

    pub fn part(&self, part: usize, b: usize) -> &[T] {
        &self.data[(part * self.batch + b) * self.len..][..self.len]
    }

    /// Squared norm of sample `b`.
    pub fn norm_sqr(&self, b: usize) -> T {
        (0..2).flat_map(|p| self.part(p, b)).map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn into_feature(self, shape: IoShape) -> Feature<T> {
        Feature {
            channels: 2,
            batch: self.batch,
            height: shape.height,
            width: shape.width,
            data: self.data,
        }
    }

    fn from_feature(f: Feature<T>) -> Self {
        SplitBatch {
            batch: f.batch,
            len: f.height * f.width,
            data: f.data,
        }
    }
}

/// `(2, H, W)` view of one complex vector.
pub fn embed<T: Real>(h: &[Complex<T>], shape: IoShape) -> Result<Feature<T>> {
    if h.len() != shape.len() {
        return Err(Error::shape("embed", shape.len(), h.len()));
    }
    Ok(SplitBatch::from_complex(h.len(), [h])?.into_feature(shape))
}

pub fn extract<T: Real>(f: &Feature<T>) -> Result<Vec<Complex<T>>> {
    if f.channels != 2 || f.batch != 1 {
        return Err(Error::Validation("extract expects a single 2-channel map".into()));
    }
    Ok(SplitBatch::from_feature(f.clone()).sample(0))
}

/// `σ_t² = σ₀² γ^(t−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma0_sq: f64,
    pub gamma: f64,
}

impl NoiseSchedule {
    /// `σ₀² = rel · mean‖h‖² / N`.
    pub fn relative(mean_energy: f64, antennas: usize, rel: f64, gamma: f64) -> Self {
        NoiseSchedule {
            sigma0_sq: rel * mean_energy / antennas as f64,
            gamma,
        }
    }

    /// Variance for layer `t` (1-based).
    pub fn variance(&self, t: usize) -> f64 {
        self.sigma0_sq * self.gamma.powi(t as i32 - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0_sq >= 0.0) || !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Validation(format!(
                "noise schedule needs sigma0_sq >= 0 and 0 < gamma < 1, got {} and {}",
                self.sigma0_sq, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPoint {
    /// `h₀ = Aᴴ y`.
    #[default]
    MatchedFilter,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnrolledConfig {
    pub layers: usize,
    pub prox: ProxNetSpec,
    pub io_shape: IoShape,
    #[serde(default)]
    pub start: StartPoint,
    /// The prox nets see `s·z` and their output is divided by `s`.
    pub input_scale: f64,
    /// Share one prox parameter set across all layers.
    #[serde(default)]
    pub tied: bool,
}

impl UnrolledConfig {
    pub fn validate(&self) -> Result<()> {
        self.prox.validate()?;
        self.io_shape.check(self.io_shape.len(), self.prox.divisor())?;
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Validation("input_scale must be positive".into()));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[h₀, h₁, …, h_T]`.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub states: Vec<SplitBatch<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> &SplitBatch<T> {
        self.states.last().expect("trajectory holds h0")
    }
}

struct LayerTape<T> {
    /// `Aᴴ(A h_in − y)`.
    grad: Vec<T>,
    prox: ProxCache<T>,
}

/// Forward record for [`UnrolledModel::backward`].
pub struct Tape<T> {
    layers: Vec<LayerTape<T>>,
}

/// `T` unrolled layers. `params` is `[raw α_1..α_T | θ_1 | … | θ_T]`, where
/// `α_t = softplus(raw α_t)`.
#[derive(Debug, Clone)]
pub struct UnrolledModel<T> {
    pub config: UnrolledConfig,
    pub net: ProxNet,
    pub params: Vec<T>,
}

impl<T: Real> UnrolledModel<T> {
    /// All prox parameters zero: every layer is a plain gradient step with
    /// step `alpha`.
    pub fn identity(config: UnrolledConfig, alpha: f64) -> Result<Self> {
        config.validate()?;
        if !(alpha > 0.0) {
            return Err(Error::Validation("step size must be positive".into()));
        }
        let net = ProxNet::new(&config.prox)?;
        let sets = if config.tied { 1 } else { config.layers };
        let mut params = vec![T::zero(); config.layers + sets * net.param_count()];
        params[..config.layers].fill(T::lit(softplus_inverse(alpha)));
        Ok(UnrolledModel { config, net, params })
    }

    /// Random prox trunks with zeroed output convolutions, and
    /// `α_t = alpha` for every layer.
    pub fn new<R: Rng + ?Sized>(config: UnrolledConfig, alpha: f64, rng: &mut R) -> Result<Self> {
        let mut model = Self::identity(config, alpha)?;
        let p = model.net.param_count();
        let sets = model.prox_sets();
        for s in 0..sets {
            let start = model.config.layers + s * p;
            let slice = &mut model.params[start..start + p];
            model.net.init(slice, rng, true);
        }
        Ok(model)
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    fn prox_sets(&self) -> usize {
        if self.config.tied {
            1
        } else {
            self.config.layers
        }
    }

    fn prox_range(&self, t: usize) -> std::ops::Range<usize> {
        let p = self.net.param_count();
        let s = if self.config.tied { 0 } else { t };
        let start = self.config.layers + s * p;
        start..start + p
    }

    /// Step size of layer `t` (0-based).
    pub fn alpha(&self, t: usize) -> f64 {
        softplus(self.params[t].as_f64())
    }

    pub fn set_alpha(&mut self, t: usize, alpha: f64) {
        self.params[t] = T::lit(softplus_inverse(alpha));
    }

    fn start(&self, a: &Matrix<T>, y: &SplitBatch<T>) -> SplitBatch<T> {
        let mut h = SplitBatch::zeros(y.batch, a.cols);
        if self.config.start == StartPoint::MatchedFilter {
            // [2B x PN] · A
            T::gemm(
                2 * y.batch,
                a.rows,
                a.cols,
                T::one(),
                &y.data,
                a.rows as isize,
                1,
                &a.data,
                a.cols as isize,
                1,
                T::zero(),
                &mut h.data,
                a.cols as isize,
                1,
            );
        }
        h
    }

    fn check(&self, a: &Matrix<T>, y: &SplitBatch<T>) -> Result<()> {
        if a.cols != self.config.io_shape.len() {
            return Err(Error::shape("combiner columns", self.config.io_shape.len(), a.cols));
        }
        if y.len != a.rows {
            return Err(Error::shape("observation length", a.rows, y.len));
        }
        Ok(())
    }

    /// Inference: no noise injection, deterministic.
    pub fn forward(&self, a: &Matrix<T>, y: &SplitBatch<T>) -> Result<Trajectory<T>> {
        Ok(self.run(a, y, None::<(&NoiseSchedule, &mut crate::rng::StreamRng)>, false)?.0)
    }

    /// Training pass: optional noise injection, keeps the tape.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        a: &Matrix<T>,
        y: &SplitBatch<T>,
        noise: Option<(&NoiseSchedule, &mut R)>,
    ) -> Result<(Trajectory<T>, Tape<T>)> {
        let (traj, tape) = self.run(a, y, noise, true)?;
        Ok((traj, tape.expect("tape requested")))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        a: &Matrix<T>,
        y: &SplitBatch<T>,
        mut noise: Option<(&NoiseSchedule, &mut R)>,
        keep: bool,
    ) -> Result<(Trajectory<T>, Option<Tape<T>>)> {
        self.check(a, y)?;
        let (pn, n) = (a.rows, a.cols);
        let rows = 2 * y.batch;
        let scale = T::lit(self.config.input_scale);
        let mut states = vec![self.start(a, y)];
        let mut tape = Vec::new();
        for t in 0..self.config.layers {
            let mut h_in = states[t].clone();
            if let Some((sched, rng)) = noise.as_mut() {
                let sd = (sched.variance(t + 1) / 2.0).sqrt();
                if sd > 0.0 {
                    let sd = T::lit(sd);
                    h_in.data.iter_mut().for_each(|v| *v += sd * normal::<T, _>(&mut **rng));
                }
            }
            let mut resid = y.data.iter().map(|&v| -v).collect::<Vec<T>>();
            T::gemm(rows, n, pn, T::one(), &h_in.data, n as isize, 1, &a.data, 1, n as isize, T::one(), &mut resid, pn as isize, 1);
            let mut grad = vec![T::zero(); rows * n];
            T::gemm(rows, pn, n, T::one(), &resid, pn as isize, 1, &a.data, n as isize, 1, T::zero(), &mut grad, n as isize, 1);
            let alpha = T::lit(self.alpha(t));
            let mut z = h_in;
            z.data.iter_mut().zip(&grad).for_each(|(v, &g)| *v = (*v - alpha * g) * scale);
            let (out, cache) = self.net.forward(&self.params[self.prox_range(t)], &z.into_feature(self.config.io_shape));
            let mut h = SplitBatch::from_feature(out);
            h.data.iter_mut().for_each(|v| *v /= scale);
            if !h.is_finite() {
                return Err(Error::NonFinite(format!("unrolled layer {} produced a non-finite estimate", t + 1)));
            }
            states.push(h);
            if keep {
                tape.push(LayerTape { grad, prox: cache });
            }
        }
        Ok((Trajectory { states }, keep.then_some(Tape { layers: tape })))
    }

    /// Gradient of a scalar loss with respect to `params`, given
    /// `d loss / d h_t` for `t = 1..T` (index `t − 1`).
    pub fn backward(&self, a: &Matrix<T>, tape: &Tape<T>, dstates: &[SplitBatch<T>]) -> Result<Vec<T>> {
        let layers = self.config.layers;
        if dstates.len() != layers || tape.layers.len() != layers {
            return Err(Error::shape("state gradients", layers, dstates.len()));
        }
        let (pn, n) = (a.rows, a.cols);
        let scale = T::lit(self.config.input_scale);
        let mut grad = vec![T::zero(); self.params.len()];
        let mut carry: Option<SplitBatch<T>> = None;
        for t in (0..layers).rev() {
            let mut dh = dstates[t].clone();
            if let Some(c) = carry.take() {
                dh.data.iter_mut().zip(&c.data).for_each(|(a, b)| *a += *b);
            }
            let rows = 2 * dh.batch;
            dh.data.iter_mut().for_each(|v| *v /= scale);
            let range = self.prox_range(t);
            let dx = {
                let g = &mut grad[range.clone()];
                self.net.backward(&self.params[range], &tape.layers[t].prox, &dh.into_feature(self.config.io_shape), g)
            };
            let mut dz = SplitBatch::from_feature(dx);
            dz.data.iter_mut().for_each(|v| *v *= scale);

            let lt = &tape.layers[t];
            let dalpha: f64 = -dz.data.iter().zip(&lt.grad).map(|(&d, &g)| (d * g).as_f64()).sum::<f64>();
            grad[t] += T::lit(dalpha * sigmoid(self.params[t].as_f64()));

            // dh_in = dz − α AᵀA dz
            let mut adz = vec![T::zero(); rows * pn];
            T::gemm(rows, n, pn, T::one(), &dz.data, n as isize, 1, &a.data, 1, n as isize, T::zero(), &mut adz, pn as isize, 1);
            let alpha = T::lit(self.alpha(t));
            T::gemm(rows, pn, n, -alpha, &adz, pn as isize, 1, &a.data, n as isize, 1, T::one(), &mut dz.data, n as isize, 1);
            carry = Some(dz);
        }
        Ok(grad)
    }

    /// Multiply-accumulates of one inference pass on a single subcarrier:
    /// real prox convolutions plus `2·PN·N` complex MACs per gradient step.
    pub fn macs(&self, measurements: usize) -> u64 {
        let io = self.config.io_shape;
        let prox = self.net.macs(io.height, io.width);
        let step = 4 * 2 * (measurements * io.len()) as u64;
        self.config.layers as u64 * (prox + step)
    }

    pub fn save(&self, path: &Path, info: &CheckpointInfo) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_VERSION,
            scalar: std::mem::size_of::<T>() * 8,
            model: self.config.clone(),
            info: info.clone(),
            params: self.params.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(json.len() as u32).to_le_bytes())?;
        f.write_all(&json)?;
        for &p in &self.params {
            match header.scalar {
                32 => f.write_all(&(p.as_f64() as f32).to_le_bytes())?,
                _ => f.write_all(&p.as_f64().to_le_bytes())?,
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        if header.format != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.format)));
        }
        let mut model = Self::identity(header.model.clone(), 1.0)?;
        if model.params.len() != header.params {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                header.params,
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            *p = match header.scalar {
                32 => {
                    let mut b = [0u8; 4];
                    f.read_exact(&mut b)?;
                    T::lit(f32::from_le_bytes(b) as f64)
                }
                64 => {
                    let mut b = [0u8; 8];
                    f.read_exact(&mut b)?;
                    T::lit(f64::from_le_bytes(b))
                }
                s => return Err(Error::Format(format!("unsupported scalar width {s}"))),
            };
        }
        if f.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint parameters".into()));
        }
        Ok((model, header))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"XLUC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub scalar: usize,
    pub model: UnrolledConfig,
    #[serde(flatten)]
    pub info: CheckpointInfo,
    pub params: usize,
}

/// Run metadata stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub config_hash: String,
    pub epoch: usize,
    /// `P·N_RF` of the combiner the weights were trained with.
    pub measurements: usize,
}
