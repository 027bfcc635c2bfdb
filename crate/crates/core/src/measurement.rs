//! Pseudo-random analog combining and noisy pilot observations.

use num_complex::Complex;
use rand::Rng;

use crate::channel::ChannelTensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::normal;
use crate::scalar::Real;

/// Stacked `(P·N_RF) x N` combiner with entries `±1/√N`.
pub type Combiner<T> = Matrix<T>;

pub fn make_combiner<T: Real, R: Rng + ?Sized>(
    antennas: usize,
    pilots: usize,
    rf_chains: usize,
    rng: &mut R,
) -> Result<Combiner<T>> {
    let rows = pilots * rf_chains;
    if rows == 0 || antennas == 0 {
        return Err(Error::Validation("combiner dimensions must be non-zero".into()));
    }
    let v = T::one() / T::lit(antennas as f64).sqrt();
    let data = (0..rows * antennas)
        .map(|_| if rng.random::<bool>() { v } else { -v })
        .collect();
    Matrix::from_vec(rows, antennas, data)
}

/// Noisy observations of one channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch<T> {
    /// `M x (P·N_RF)`, row-major by subcarrier.
    pub y: Vec<Complex<T>>,
    pub measurements: usize,
    pub subcarriers: usize,
    /// Noise power per complex entry.
    pub sigma2: T,
}

impl<T: Real> MeasurementBatch<T> {
    pub fn row(&self, m: usize) -> &[Complex<T>] {
        &self.y[m * self.measurements..(m + 1) * self.measurements]
    }
}

/// `A h` for a real combiner and complex channel vector.
pub fn apply_combiner<T: Real>(a: &Combiner<T>, h: &[Complex<T>]) -> Vec<Complex<T>> {
    (0..a.rows)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(h)
                .fold(Complex::new(T::zero(), T::zero()), |acc, (&w, z)| acc + z * w)
        })
        .collect()
}

/// Noise power that realizes `snr_db` at the combiner output, averaged over
/// subcarriers. Returns zero for `snr_db = +∞`.
pub fn noise_power<T: Real>(h: &ChannelTensor<T>, a: &Combiner<T>, snr_db: f64) -> T {
    if snr_db == f64::INFINITY {
        return T::zero();
    }
    let signal: f64 = h
        .rows()
        .map(|row| crate::scalar::norm_sqr(&apply_combiner(a, row)).as_f64())
        .sum::<f64>()
        / h.subcarriers as f64;
    T::lit(signal / a.rows as f64 / 10f64.powf(snr_db / 10.0))
}

/// `y_m = A h_m + n_m` with `n_m ~ CN(0, σ² I)` at the SNR-implied `σ²`.
pub fn observe<T: Real, R: Rng + ?Sized>(
    h: &ChannelTensor<T>,
    a: &Combiner<T>,
    snr_db: f64,
    rng: &mut R,
) -> Result<MeasurementBatch<T>> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Validation(format!("invalid SNR {snr_db} dB")));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("channel passed to observe".into()));
    }
    let sigma2 = noise_power(h, a, snr_db);
    observe_with_noise_power(h, a, sigma2, rng)
}

/// Observation with an explicit noise power per complex entry.
pub fn observe_with_noise_power<T: Real, R: Rng + ?Sized>(
    h: &ChannelTensor<T>,
    a: &Combiner<T>,
    sigma2: T,
    rng: &mut R,
) -> Result<MeasurementBatch<T>> {
    if a.cols != h.antennas {
        return Err(Error::shape("combiner columns", h.antennas, a.cols));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("channel passed to observe".into()));
    }
    let std = (sigma2 / T::lit(2.0)).sqrt();
    let mut y = Vec::with_capacity(h.subcarriers * a.rows);
    for row in h.rows() {
        for z in apply_combiner(a, row) {
            if sigma2 > T::zero() {
                let n = Complex::new(normal::<T, _>(rng) * std, normal::<T, _>(rng) * std);
                y.push(z + n);
            } else {
                y.push(z);
            }
        }
    }
    Ok(MeasurementBatch {
        y,
        measurements: a.rows,
        subcarriers: h.subcarriers,
        sigma2,
    })
}
