//! Polar-domain (angle x distance) dictionaries.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::channel::{plane_wave_ula, plane_wave_upa, steering_vector_ula, steering_vector_upa, ArrayGeometry, ArrayKind};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::Real;

/// Sampling rule for the dictionary grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarGrid {
    /// Angle samples, uniform in the sine domain. For planar arrays this is
    /// the per-axis multiplier applied to `(n1, n2)`.
    pub angle_factor: usize,
    /// Finite distance rings in metres.
    pub rings: Vec<f64>,
    /// Include the plane-wave ring (`r = ∞`).
    pub far_field: bool,
}

impl PolarGrid {
    /// Twice-oversampled angles and ten geometric rings spanning
    /// `[r_min, r_max]`, plus the far-field ring.
    pub fn standard(r_min: f64, r_max: f64, rings: usize) -> Self {
        let beta = if rings > 1 { (r_max / r_min).powf(1.0 / (rings - 1) as f64) } else { 1.0 };
        PolarGrid {
            angle_factor: 2,
            rings: (0..rings).map(|g| r_min * beta.powi(g as i32)).collect(),
            far_field: true,
        }
    }

    pub fn far_field_only(angle_factor: usize) -> Self {
        PolarGrid {
            angle_factor,
            rings: Vec::new(),
            far_field: true,
        }
    }
}

impl Default for PolarGrid {
    fn default() -> Self {
        Self::standard(5.0, 30.0, 10)
    }
}

/// Grid location of one atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub theta: f64,
    pub phi: f64,
    /// `None` for the plane-wave ring.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PolarDictionary<T> {
    /// `N x G`, unit-norm columns.
    pub atoms: CMatrix<T>,
    pub grid: Vec<GridPoint>,
    pub frequency: f64,
    /// Grid points discarded because they fell inside the array aperture.
    pub skipped: usize,
}

/// `G` sine-domain samples `−1 + (2i + 1)/G`, symmetric and excluding ±1.
pub fn sine_grid(g: usize) -> Vec<f64> {
    (0..g).map(|i| -1.0 + (2 * i + 1) as f64 / g as f64).collect()
}

fn atom<T: Real>(geom: &ArrayGeometry, p: GridPoint, f: f64) -> Result<Vec<Complex<T>>> {
    match (geom.kind, p.distance) {
        (ArrayKind::Ula, None) => Ok(plane_wave_ula(geom.antennas, geom.spacing, p.theta, f)),
        (ArrayKind::Ula, Some(r)) => steering_vector_ula(geom, r, p.theta, f),
        (ArrayKind::Upa { n1, n2 }, None) => Ok(plane_wave_upa(n1, n2, geom.spacing, p.phi, p.theta, f)),
        (ArrayKind::Upa { .. }, Some(r)) => steering_vector_upa(geom, r, p.phi, p.theta, f),
    }
}

impl<T: Real> PolarDictionary<T> {
    /// Dictionary over explicit grid points. Points inside the aperture are
    /// skipped and counted.
    pub fn from_points(geom: &ArrayGeometry, f: f64, points: &[GridPoint]) -> Result<Self> {
        let mut columns = Vec::with_capacity(points.len());
        let mut grid = Vec::with_capacity(points.len());
        let mut skipped = 0;
        for &p in points {
            match atom(geom, p, f) {
                Ok(a) => {
                    columns.push(a);
                    grid.push(p);
                }
                Err(Error::Degenerate { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if skipped > 0 {
            log::warn!("polar dictionary: skipped {skipped} grid points inside the aperture");
        }
        Ok(PolarDictionary {
            atoms: CMatrix::from_columns(geom.antennas, &columns)?,
            grid,
            frequency: f,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Builds the polar dictionary evaluated at frequency `f`.
pub fn build_polar_dictionary<T: Real>(geom: &ArrayGeometry, f: f64, grid: &PolarGrid) -> Result<PolarDictionary<T>> {
    if grid.angle_factor == 0 || (grid.rings.is_empty() && !grid.far_field) {
        return Err(Error::Validation("polar grid must contain at least one angle and one ring".into()));
    }
    let directions: Vec<(f64, f64)> = match geom.kind {
        ArrayKind::Ula => sine_grid(grid.angle_factor * geom.antennas)
            .into_iter()
            .map(|s| (s.asin(), 0.0))
            .collect(),
        ArrayKind::Upa { n1, n2 } => {
            // (u_y, u_z) = (sinθ sinφ, cosθ) on the unit disc
            let mut dirs = Vec::new();
            for uy in sine_grid(grid.angle_factor * n1) {
                for uz in sine_grid(grid.angle_factor * n2) {
                    if uy * uy + uz * uz >= 1.0 {
                        continue;
                    }
                    let theta = uz.acos();
                    let phi = (uy / theta.sin()).clamp(-1.0, 1.0).asin();
                    dirs.push((theta, phi));
                }
            }
            dirs
        }
    };
    let mut rings: Vec<Option<f64>> = grid.rings.iter().map(|&r| Some(r)).collect();
    if grid.far_field {
        rings.insert(0, None);
    }
    let points: Vec<GridPoint> = rings
        .iter()
        .flat_map(|&distance| {
            directions.iter().map(move |&(theta, phi)| GridPoint { theta, phi, distance })
        })
        .collect();
    let dict = PolarDictionary::from_points(geom, f, &points)?;
    if dict.len() < geom.antennas {
        return Err(Error::Validation(format!(
            "polar dictionary has {} atoms, fewer than {} antennas",
            dict.len(),
            geom.antennas
        )));
    }
    Ok(dict)
}

/// Correlation spectrum `Dᴴ h`.
pub fn polar_projection<T: Real>(h: &[Complex<T>], dict: &PolarDictionary<T>) -> Result<Vec<Complex<T>>> {
    if h.len() != dict.atoms.rows {
        return Err(Error::shape("polar projection", dict.atoms.rows, h.len()));
    }
    Ok(dict.atoms.adjoint_matvec(h))
}
