//! Linear MMSE estimation with an empirical channel covariance.

use num_complex::Complex;

use super::{Diagnostics, SubcarrierEstimate};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_psd_solve, CMatrix};
use crate::scalar::Real;

/// `R = (1/K) Σ h hᴴ` over the given channel vectors.
pub fn empirical_covariance<'a, T: Real>(n: usize, samples: impl IntoIterator<Item = &'a [Complex<T>]>) -> Result<CMatrix<T>> {
    let mut acc = vec![Complex::new(0.0f64, 0.0); n * n];
    let mut count = 0usize;
    for h in samples {
        if h.len() != n {
            return Err(Error::shape("covariance sample", n, h.len()));
        }
        let h64: Vec<Complex<f64>> = h.iter().map(|z| Complex::new(z.re.as_f64(), z.im.as_f64())).collect();
        for i in 0..n {
            let hi = h64[i];
            for j in 0..n {
                acc[i * n + j] += hi * h64[j].conj();
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Validation("covariance needs at least one sample".into()));
    }
    let scale = 1.0 / count as f64;
    CMatrix::from_vec(n, n, acc.into_iter().map(|z| Complex::new(T::lit(z.re * scale), T::lit(z.im * scale))).collect())
}

/// Precomputed `R Aᴴ` and `A R Aᴴ` for a fixed combiner and prior.
#[derive(Debug, Clone)]
pub struct LmmseOperator<T> {
    pub r_ah: CMatrix<T>,
    pub a_r_ah: CMatrix<T>,
}

impl<T: Real> LmmseOperator<T> {
    pub fn new(a: &CMatrix<T>, r_h: &CMatrix<T>) -> Result<Self> {
        if r_h.rows != a.cols || r_h.cols != a.cols {
            return Err(Error::shape("channel covariance", a.cols, r_h.rows));
        }
        let r_ah = r_h.matmul(&a.adjoint())?;
        let a_r_ah = a.matmul(&r_ah)?;
        Ok(LmmseOperator { r_ah, a_r_ah })
    }

    pub fn estimate(&self, y: &[Complex<T>], sigma2: T) -> Result<SubcarrierEstimate<T>> {
        let n = self.a_r_ah.rows;
        if y.len() != n {
            return Err(Error::shape("lmmse observation", n, y.len()));
        }
        let mut inner = self.a_r_ah.clone();
        for i in 0..n {
            inner.data[i * n + i] += Complex::new(sigma2, T::zero());
        }
        let sol = hermitian_psd_solve(&inner, y, T::lit(1e2) * T::epsilon())?;
        let h_hat = self.r_ah.matvec(&sol.x);
        Ok(SubcarrierEstimate {
            h_hat,
            diagnostics: Diagnostics {
                flagged: sol.rank_deficient,
                iterations: 1,
                ..Diagnostics::default()
            },
        })
    }
}

/// `ĥ = R Aᴴ (A R Aᴴ + σ² I)⁻¹ y`. A singular inner matrix is solved on its
/// numerical range and flagged.
pub fn lmmse_estimate<T: Real>(y: &[Complex<T>], a: &CMatrix<T>, r_h: &CMatrix<T>, sigma2: T) -> Result<SubcarrierEstimate<T>> {
    if !(sigma2 >= T::zero()) {
        return Err(Error::Validation("noise power must be non-negative".into()));
    }
    LmmseOperator::new(a, r_h)?.estimate(y, sigma2)
}
