//! Wideband near-field channel synthesis for linear and planar arrays.
//!
//! Antenna `n` of an `N`-element linear array sits at offset `δ_n·d` from the
//! array centre with `δ_n = (2n − N − 1)/2` (1-based `n`). Planar arrays use
//! the same offsets along both panel axes and are flattened row-major over
//! `(n₁, n₂)`, `n₂` fastest. All visibility indices in this module are
//! 0-based.

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::complex_normal;
use crate::scalar::Real;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrayKind {
    Ula,
    Upa { n1: usize, n2: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub kind: ArrayKind,
    /// Total element count.
    pub antennas: usize,
    /// Element spacing in metres.
    pub spacing: f64,
    /// Centre frequency in Hz.
    pub carrier: f64,
    /// Total bandwidth in Hz.
    pub bandwidth: f64,
    pub subcarriers: usize,
}

impl ArrayGeometry {
    /// Linear array with half-wavelength spacing at the carrier.
    pub fn ula(antennas: usize, carrier: f64, bandwidth: f64, subcarriers: usize) -> Result<Self> {
        Self::new(
            ArrayKind::Ula,
            antennas,
            SPEED_OF_LIGHT / (2.0 * carrier),
            carrier,
            bandwidth,
            subcarriers,
        )
    }

    /// Planar `n1 x n2` array with half-wavelength spacing at the carrier.
    pub fn upa(n1: usize, n2: usize, carrier: f64, bandwidth: f64, subcarriers: usize) -> Result<Self> {
        Self::new(
            ArrayKind::Upa { n1, n2 },
            n1 * n2,
            SPEED_OF_LIGHT / (2.0 * carrier),
            carrier,
            bandwidth,
            subcarriers,
        )
    }

    pub fn new(
        kind: ArrayKind,
        antennas: usize,
        spacing: f64,
        carrier: f64,
        bandwidth: f64,
        subcarriers: usize,
    ) -> Result<Self> {
        let geom = ArrayGeometry {
            kind,
            antennas,
            spacing,
            carrier,
            bandwidth,
            subcarriers,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Validation(format!("array geometry: {msg}")));
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return fail("spacing must be positive");
        }
        if !(self.carrier.is_finite() && self.carrier > 0.0) {
            return fail("carrier frequency must be positive");
        }
        if !(self.bandwidth.is_finite() && self.bandwidth >= 0.0) {
            return fail("bandwidth must be non-negative");
        }
        if self.subcarriers == 0 {
            return fail("at least one subcarrier is required");
        }
        if self.antennas == 0 {
            return fail("at least one antenna is required");
        }
        if let ArrayKind::Upa { n1, n2 } = self.kind {
            if n1 == 0 || n2 == 0 || n1 * n2 != self.antennas {
                return fail("planar array requires antennas = n1 * n2");
            }
        }
        Ok(())
    }

    /// Carrier wavelength.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier
    }

    /// Largest extent of the array, used for the Rayleigh distance.
    pub fn aperture(&self) -> f64 {
        match self.kind {
            ArrayKind::Ula => (self.antennas - 1) as f64 * self.spacing,
            ArrayKind::Upa { n1, n2 } => {
                let a = (n1 - 1) as f64 * self.spacing;
                let b = (n2 - 1) as f64 * self.spacing;
                a.hypot(b)
            }
        }
    }

    /// Distance from the array centre to its farthest element.
    pub fn half_extent(&self) -> f64 {
        self.aperture() / 2.0
    }

    /// `2 D² / λ` at the carrier.
    pub fn rayleigh_distance(&self) -> f64 {
        rayleigh_distance(self.aperture(), self.carrier)
    }
}

/// `2 D² / λ` for aperture `D` (m) at frequency `f` (Hz).
pub fn rayleigh_distance(aperture: f64, frequency: f64) -> f64 {
    2.0 * aperture * aperture * frequency / SPEED_OF_LIGHT
}

/// Centred element offsets `δ_n = (2n − N − 1)/2`.
pub fn element_offsets(n: usize) -> impl Iterator<Item = f64> {
    (1..=n).map(move |i| (2.0 * i as f64 - n as f64 - 1.0) / 2.0)
}

/// `f_m = f_c + (2m − M − 1)·B/(2M)` for `m = 1..M`.
pub fn subcarrier_frequencies(geom: &ArrayGeometry) -> Vec<f64> {
    let m_total = geom.subcarriers as f64;
    (1..=geom.subcarriers)
        .map(|m| geom.carrier + (2.0 * m as f64 - m_total - 1.0) * geom.bandwidth / (2.0 * m_total))
        .collect()
}

/// `r⁽ⁿ⁾ − r` computed without cancellation: the numerator is the exact
/// difference of squared distances.
#[inline]
fn range_offset(r: f64, cross: f64, sq: f64) -> f64 {
    let num = sq - 2.0 * r * cross;
    num / ((r * r + num).sqrt() + r)
}

fn check_aperture(r: f64, half_extent: f64) -> Result<()> {
    if !(r.is_finite() && r > half_extent) {
        return Err(Error::Degenerate {
            distance: r,
            aperture: half_extent,
        });
    }
    Ok(())
}

/// Spherical-wavefront steering vector of a linear array.
pub fn steering_vector_ula<T: Real>(
    geom: &ArrayGeometry,
    r: f64,
    theta: f64,
    f: f64,
) -> Result<Vec<Complex<T>>> {
    if geom.kind != ArrayKind::Ula {
        return Err(Error::Validation("ULA steering requested for a planar array".into()));
    }
    let n = geom.antennas;
    let half = element_offsets(n).fold(0.0f64, |m, x| m.max(x.abs())) * geom.spacing;
    check_aperture(r, half)?;
    let k = 2.0 * std::f64::consts::PI * f / SPEED_OF_LIGHT;
    let scale = 1.0 / (n as f64).sqrt();
    let s = theta.sin();
    Ok(element_offsets(n)
        .map(|delta| {
            let x = delta * geom.spacing;
            let dr = range_offset(r, x * s, x * x);
            let (sin, cos) = (-k * dr).sin_cos();
            Complex::new(T::lit(scale * cos), T::lit(scale * sin))
        })
        .collect())
}

/// Spherical-wavefront steering vector of a planar array, element order
/// row-major over `(n₁, n₂)`.
pub fn steering_vector_upa<T: Real>(
    geom: &ArrayGeometry,
    r: f64,
    phi: f64,
    theta: f64,
    f: f64,
) -> Result<Vec<Complex<T>>> {
    let ArrayKind::Upa { n1, n2 } = geom.kind else {
        return Err(Error::Validation("UPA steering requested for a linear array".into()));
    };
    let d = geom.spacing;
    let m1 = (n1 - 1) as f64 / 2.0 * d;
    let m2 = (n2 - 1) as f64 / 2.0 * d;
    check_aperture(r, m1.hypot(m2))?;
    let k = 2.0 * std::f64::consts::PI * f / SPEED_OF_LIGHT;
    let scale = 1.0 / ((n1 * n2) as f64).sqrt();
    // Unit direction of the scatterer; antenna (n₁, n₂) sits at (0, δ₁d, δ₂d).
    let uy = theta.sin() * phi.sin();
    let uz = theta.cos();
    let mut out = Vec::with_capacity(n1 * n2);
    for d1 in element_offsets(n1) {
        let y = d1 * d;
        for d2 in element_offsets(n2) {
            let z = d2 * d;
            let dr = range_offset(r, uy * y + uz * z, y * y + z * z);
            let (sin, cos) = (-k * dr).sin_cos();
            out.push(Complex::new(T::lit(scale * cos), T::lit(scale * sin)));
        }
    }
    Ok(out)
}

/// Plane-wave (far-field) steering vector of a linear array.
pub fn plane_wave_ula<T: Real>(n: usize, spacing: f64, theta: f64, f: f64) -> Vec<Complex<T>> {
    let k = 2.0 * std::f64::consts::PI * f / SPEED_OF_LIGHT;
    let scale = 1.0 / (n as f64).sqrt();
    element_offsets(n)
        .map(|delta| {
            let (sin, cos) = (k * delta * spacing * theta.sin()).sin_cos();
            Complex::new(T::lit(scale * cos), T::lit(scale * sin))
        })
        .collect()
}

/// Plane-wave steering vector of a planar array.
pub fn plane_wave_upa<T: Real>(n1: usize, n2: usize, spacing: f64, phi: f64, theta: f64, f: f64) -> Vec<Complex<T>> {
    let k = 2.0 * std::f64::consts::PI * f / SPEED_OF_LIGHT;
    let scale = 1.0 / ((n1 * n2) as f64).sqrt();
    let uy = theta.sin() * phi.sin();
    let uz = theta.cos();
    let mut out = Vec::with_capacity(n1 * n2);
    for d1 in element_offsets(n1) {
        for d2 in element_offsets(n2) {
            let (sin, cos) = (k * spacing * (d1 * uy + d2 * uz)).sin_cos();
            out.push(Complex::new(T::lit(scale * cos), T::lit(scale * sin)));
        }
    }
    out
}

/// Visibility region of one path: the sorted 0-based antenna indices that
/// observe it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility(Vec<usize>);

impl Visibility {
    pub fn new(n: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Validation("visibility region is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!(
                "visibility index {bad} out of range for {n} antennas"
            )));
        }
        Ok(Visibility(indices))
    }

    pub fn full(n: usize) -> Self {
        Visibility((0..n).collect())
    }

    /// Contiguous block `[start, start + len)`.
    pub fn block(n: usize, start: usize, len: usize) -> Result<Self> {
        Self::new(n, (start..start + len).collect())
    }

    /// Axis-aligned rectangle on a row-major `n1 x n2` panel.
    pub fn rect(n1: usize, n2: usize, start: (usize, usize), len: (usize, usize)) -> Result<Self> {
        if start.0 + len.0 > n1 || start.1 + len.1 > n2 {
            return Err(Error::Validation("visibility rectangle exceeds the panel".into()));
        }
        let idx = (start.0..start.0 + len.0)
            .flat_map(|i| (start.1..start.1 + len.1).map(move |j| i * n2 + j))
            .collect();
        Self::new(n1 * n2, idx)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Binary mask with ones at the visible indices.
pub fn visibility_mask(n: usize, visible: &[usize]) -> Result<Vec<u8>> {
    let mut mask = vec![0u8; n];
    for &i in visible {
        if i >= n {
            return Err(Error::Validation(format!(
                "visibility index {i} out of range for {n} antennas"
            )));
        }
        mask[i] = 1;
    }
    Ok(mask)
}

/// Zeroes the entries of `v` outside the mask.
pub fn apply_mask<T: Real>(v: &mut [Complex<T>], mask: &[u8]) {
    for (z, &m) in v.iter_mut().zip(mask) {
        if m == 0 {
            *z = Complex::new(T::zero(), T::zero());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path<T> {
    /// One complex gain per subcarrier.
    pub gains: Vec<Complex<T>>,
    /// Elevation / angle of arrival (rad).
    pub theta: f64,
    /// Azimuth (rad); ignored for linear arrays.
    pub phi: f64,
    /// Scatterer distance from the array centre (m).
    pub distance: f64,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathSet<T> {
    pub paths: Vec<Path<T>>,
}

impl<T: Real> PathSet<T> {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn validate(&self, geom: &ArrayGeometry) -> Result<()> {
        for (l, p) in self.paths.iter().enumerate() {
            if !(p.distance.is_finite() && p.distance > 0.0) {
                return Err(Error::Validation(format!("path {l}: distance must be positive")));
            }
            if p.gains.len() != geom.subcarriers {
                return Err(Error::shape("path gains", geom.subcarriers, p.gains.len()));
            }
            if p.gains.iter().any(|g| !(g.re.is_finite() && g.im.is_finite())) {
                return Err(Error::NonFinite(format!("gain of path {l}")));
            }
            if p.visibility.is_empty() || p.visibility.indices().iter().any(|&i| i >= geom.antennas) {
                return Err(Error::Validation(format!("path {l}: invalid visibility region")));
            }
        }
        Ok(())
    }
}

/// Ranges used to draw random paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSampling {
    pub paths: usize,
    /// Scatterer distance range in metres.
    pub distance: (f64, f64),
    /// Elevation / angle-of-arrival range in radians.
    pub theta: (f64, f64),
    /// Azimuth range in radians (planar arrays only).
    pub phi: (f64, f64),
    /// Discrete coverage rates, each in (0, 1].
    pub coverage: Vec<f64>,
}

impl PathSampling {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                Err(Error::Validation(format!("{name} range [{lo}, {hi}] is degenerate")))
            } else {
                Ok(())
            }
        };
        range("distance", self.distance)?;
        range("theta", self.theta)?;
        range("phi", self.phi)?;
        if self.distance.0 <= 0.0 {
            return Err(Error::Validation("distance range must be positive".into()));
        }
        if self.coverage.is_empty() {
            return Err(Error::Validation("coverage set is empty".into()));
        }
        if let Some(c) = self.coverage.iter().find(|&&c| !(c > 0.0 && c <= 1.0)) {
            return Err(Error::Validation(format!("coverage rate {c} outside (0, 1]")));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a random path set: complex-normal gains, uniform angles and
/// distances, and a contiguous (or rectangular) non-wrapping visibility block.
pub fn sample_paths<T: Real, R: Rng + ?Sized>(
    geom: &ArrayGeometry,
    spec: &PathSampling,
    rng: &mut R,
) -> Result<PathSet<T>> {
    spec.validate()?;
    let mut paths = Vec::with_capacity(spec.paths);
    for _ in 0..spec.paths {
        let gains = (0..geom.subcarriers).map(|_| complex_normal(rng)).collect();
        let theta = uniform(rng, spec.theta);
        let phi = match geom.kind {
            ArrayKind::Ula => 0.0,
            ArrayKind::Upa { .. } => uniform(rng, spec.phi),
        };
        let distance = uniform(rng, spec.distance);
        let rate = spec.coverage[rng.random_range(0..spec.coverage.len())];
        let visibility = match geom.kind {
            ArrayKind::Ula => {
                let len = block_len(rate, geom.antennas);
                let start = rng.random_range(0..=geom.antennas - len);
                Visibility::block(geom.antennas, start, len)?
            }
            ArrayKind::Upa { n1, n2 } => {
                let side = rate.sqrt();
                let len = (block_len(side, n1), block_len(side, n2));
                let start = (rng.random_range(0..=n1 - len.0), rng.random_range(0..=n2 - len.1));
                Visibility::rect(n1, n2, start, len)?
            }
        };
        paths.push(Path {
            gains,
            theta,
            phi,
            distance,
            visibility,
        });
    }
    Ok(PathSet { paths })
}

/// `⌈rate·n⌉` clamped to `[1, n]`.
fn block_len(rate: f64, n: usize) -> usize {
    // Guard against 0.25 * 512 landing a hair above 128.
    let raw = (rate * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Complex `M x N` channel, row-major by subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor<T> {
    pub subcarriers: usize,
    pub antennas: usize,
    pub values: Vec<Complex<T>>,
}

impl<T: Real> ChannelTensor<T> {
    pub fn zeros(subcarriers: usize, antennas: usize) -> Self {
        ChannelTensor {
            subcarriers,
            antennas,
            values: vec![Complex::new(T::zero(), T::zero()); subcarriers * antennas],
        }
    }

    pub fn from_rows(subcarriers: usize, antennas: usize, values: Vec<Complex<T>>) -> Result<Self> {
        if values.len() != subcarriers * antennas {
            return Err(Error::shape("channel tensor", subcarriers * antennas, values.len()));
        }
        Ok(ChannelTensor {
            subcarriers,
            antennas,
            values,
        })
    }

    pub fn row(&self, m: usize) -> &[Complex<T>] {
        &self.values[m * self.antennas..(m + 1) * self.antennas]
    }

    pub fn row_mut(&mut self, m: usize) -> &mut [Complex<T>] {
        &mut self.values[m * self.antennas..(m + 1) * self.antennas]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex<T>]> {
        self.values.chunks(self.antennas)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Channel response of a single path at every subcarrier (unit gain, global
/// phase term included, visibility applied).
pub fn path_response<T: Real>(geom: &ArrayGeometry, path: &Path<T>, freqs: &[f64]) -> Result<Vec<Vec<Complex<f64>>>> {
    let mask = visibility_mask(geom.antennas, path.visibility.indices())?;
    freqs
        .iter()
        .map(|&f| {
            let mut b: Vec<Complex<f64>> = match geom.kind {
                ArrayKind::Ula => steering_vector_ula(geom, path.distance, path.theta, f)?,
                ArrayKind::Upa { .. } => steering_vector_upa(geom, path.distance, path.phi, path.theta, f)?,
            };
            apply_mask(&mut b, &mask);
            let phase = -2.0 * std::f64::consts::PI * f * path.distance / SPEED_OF_LIGHT;
            let rot = Complex::from_polar(1.0, phase);
            b.iter_mut().for_each(|z| *z *= rot);
            Ok(b)
        })
        .collect()
}

/// `h_m = Σ_l α_{l,m} e^{−j2π r_l/λ_m} b(·, f_m) ⊙ q(VR_l)`.
pub fn synthesize_channel<T: Real>(geom: &ArrayGeometry, paths: &PathSet<T>) -> Result<ChannelTensor<T>> {
    geom.validate()?;
    paths.validate(geom)?;
    let freqs = subcarrier_frequencies(geom);
    let (m_total, n) = (geom.subcarriers, geom.antennas);
    let mut acc = vec![Complex::new(0.0f64, 0.0); m_total * n];
    for path in &paths.paths {
        let response = path_response(geom, path, &freqs)?;
        for (m, b) in response.iter().enumerate() {
            let g = Complex::new(path.gains[m].re.as_f64(), path.gains[m].im.as_f64());
            for (dst, z) in acc[m * n..(m + 1) * n].iter_mut().zip(b) {
                *dst += g * z;
            }
        }
    }
    let values = acc
        .into_iter()
        .map(|z| Complex::new(T::lit(z.re), T::lit(z.im)))
        .collect();
    ChannelTensor::from_rows(m_total, n, values)
}
