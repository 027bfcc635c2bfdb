//! Proximal gradient descent on `½‖y − Ah‖² + ρR(h)`.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::{norm, norm_sqr, Real};

/// Proximal map of `step · ρR`.
pub trait Prox<T: Real> {
    fn prox(&self, z: &[Complex<T>], step: T) -> Vec<Complex<T>>;

    /// `ρR(h)` when the regularizer has a closed form.
    fn penalty(&self, _h: &[Complex<T>]) -> Option<T> {
        None
    }
}

/// `R = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProx;

impl<T: Real> Prox<T> for IdentityProx {
    fn prox(&self, z: &[Complex<T>], _step: T) -> Vec<Complex<T>> {
        z.to_vec()
    }

    fn penalty(&self, _h: &[Complex<T>]) -> Option<T> {
        Some(T::zero())
    }
}

/// `ρ‖h‖₁`, whose prox is complex soft thresholding at `step · ρ`.
#[derive(Debug, Clone, Copy)]
pub struct L1Prox<T> {
    pub rho: T,
}

impl<T: Real> Prox<T> for L1Prox<T> {
    fn prox(&self, z: &[Complex<T>], step: T) -> Vec<Complex<T>> {
        z.iter().map(|&v| soft_threshold(v, step * self.rho)).collect()
    }

    fn penalty(&self, h: &[Complex<T>]) -> Option<T> {
        Some(self.rho * h.iter().map(|z| z.norm()).sum::<T>())
    }
}

/// Shrinks the magnitude by `tau`, preserving phase.
pub fn soft_threshold<T: Real>(z: Complex<T>, tau: T) -> Complex<T> {
    let mag = z.norm();
    if mag <= tau {
        Complex::new(T::zero(), T::zero())
    } else {
        z * ((mag - tau) / mag)
    }
}

/// `Aᴴ(Ah − y)`, the Wirtinger gradient of `½‖y − Ah‖²`.
pub fn data_gradient<T: Real>(a: &CMatrix<T>, h: &[Complex<T>], y: &[Complex<T>]) -> Vec<Complex<T>> {
    let mut r = a.matvec(h);
    r.iter_mut().zip(y).for_each(|(p, q)| *p -= q);
    a.adjoint_matvec(&r)
}

pub fn data_fidelity<T: Real>(a: &CMatrix<T>, h: &[Complex<T>], y: &[Complex<T>]) -> T {
    let mut r = a.matvec(h);
    r.iter_mut().zip(y).for_each(|(p, q)| *p -= q);
    norm_sqr(&r) / T::lit(2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdInit {
    #[default]
    Zero,
    /// `Aᴴ y`.
    MatchedFilter,
}

#[derive(Debug, Clone)]
pub struct PgdOutput<T> {
    pub h: Vec<Complex<T>>,
    /// `h_1 .. h_T`.
    pub trajectory: Vec<Vec<Complex<T>>>,
    /// Objective after every iterate, when the regularizer is known.
    pub objective: Option<Vec<T>>,
}

/// Runs `iterations` steps of
/// `z_t = h_{t−1} − α Aᴴ(A h_{t−1} − y)`, `h_t = prox(z_t)`.
pub fn pgd_estimate<T: Real, P: Prox<T> + ?Sized>(
    y: &[Complex<T>],
    a: &CMatrix<T>,
    prox: &P,
    alpha: T,
    iterations: usize,
    init: PgdInit,
) -> Result<PgdOutput<T>> {
    if !(alpha > T::zero()) {
        return Err(Error::Validation("PGD step size must be positive".into()));
    }
    if y.len() != a.rows {
        return Err(Error::shape("pgd observation", a.rows, y.len()));
    }
    let mut h = match init {
        PgdInit::Zero => vec![Complex::new(T::zero(), T::zero()); a.cols],
        PgdInit::MatchedFilter => a.adjoint_matvec(y),
    };
    let bound = T::lit(1e6) * norm(y);
    let mut trajectory = Vec::with_capacity(iterations);
    let mut objective = prox.penalty(&h).map(|_| Vec::with_capacity(iterations));
    for t in 0..iterations {
        let g = data_gradient(a, &h, y);
        let z: Vec<Complex<T>> = h.iter().zip(&g).map(|(hv, gv)| hv - gv * alpha).collect();
        h = prox.prox(&z, alpha);
        let size = norm(&h);
        if !size.is_finite() || size > bound && size > T::zero() {
            return Err(Error::Divergence(format!("PGD iterate {} has norm {}", t + 1, size)));
        }
        if let Some(obj) = objective.as_mut() {
            let pen = prox.penalty(&h).unwrap_or_else(T::zero);
            obj.push(data_fidelity(a, &h, y) + pen);
        }
        trajectory.push(h.clone());
    }
    Ok(PgdOutput { h, trajectory, objective })
}
