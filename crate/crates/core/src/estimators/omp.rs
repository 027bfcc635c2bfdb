//! Orthogonal matching pursuit over a polar dictionary.

use num_complex::Complex;

use super::dictionary::PolarDictionary;
use super::{Diagnostics, SubcarrierEstimate};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::scalar::{norm, Real};

/// Sensing matrix `A·D` with cached column norms; reusable across samples
/// that share a combiner and dictionary.
#[derive(Debug, Clone)]
pub struct OmpOperator<T> {
    pub sensing: CMatrix<T>,
    pub column_norms: Vec<T>,
}

impl<T: Real> OmpOperator<T> {
    pub fn new(a: &CMatrix<T>, dict: &PolarDictionary<T>) -> Result<Self> {
        let sensing = a.matmul(&dict.atoms)?;
        let column_norms = (0..sensing.cols).map(|j| norm(&sensing.column(j))).collect();
        Ok(OmpOperator { sensing, column_norms })
    }
}

/// OMP for one subcarrier.
///
/// Each iteration adds the atom with the largest normalized correlation to the
/// residual and re-fits all selected coefficients by least squares. Stops at
/// `k_max` atoms, when the residual norm drops to `residual_tol`, or when the
/// support system becomes rank deficient (flagged).
pub fn omp_estimate<T: Real>(
    y: &[Complex<T>],
    a: &CMatrix<T>,
    dict: &PolarDictionary<T>,
    k_max: usize,
    residual_tol: T,
) -> Result<SubcarrierEstimate<T>> {
    let op = OmpOperator::new(a, dict)?;
    omp_with_operator(y, &op, dict, k_max, residual_tol)
}

pub fn omp_with_operator<T: Real>(
    y: &[Complex<T>],
    op: &OmpOperator<T>,
    dict: &PolarDictionary<T>,
    k_max: usize,
    residual_tol: T,
) -> Result<SubcarrierEstimate<T>> {
    let phi = &op.sensing;
    if y.len() != phi.rows {
        return Err(Error::shape("omp observation", phi.rows, y.len()));
    }
    if k_max > phi.rows {
        return Err(Error::Validation(format!(
            "k_max = {k_max} exceeds the {} available measurements",
            phi.rows
        )));
    }
    let zero = Complex::new(T::zero(), T::zero());
    let dot = |u: &[Complex<T>], v: &[Complex<T>]| -> Complex<T> { u.iter().zip(v).map(|(p, q)| p.conj() * q).sum() };
    let mut residual = y.to_vec();
    let mut support: Vec<usize> = Vec::new();
    // Thin QR of the selected columns: `basis` is orthonormal, `r_cols[k]`
    // holds column k of the upper-triangular factor.
    let mut basis: Vec<Vec<Complex<T>>> = Vec::new();
    let mut r_cols: Vec<Vec<Complex<T>>> = Vec::new();
    let mut residual_history = vec![norm(&residual)];
    let mut flagged = false;
    let tiny = T::epsilon();

    while support.len() < k_max && *residual_history.last().unwrap() > residual_tol {
        let corr = phi.adjoint_matvec(&residual);
        let mut best = None;
        let mut best_score = T::zero();
        for (j, c) in corr.iter().enumerate() {
            if op.column_norms[j] <= tiny || support.contains(&j) {
                continue;
            }
            let score = c.norm() / op.column_norms[j];
            if score > best_score {
                best_score = score;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };

        let mut q = phi.column(j);
        let mut r = vec![zero; basis.len() + 1];
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for (k, b) in basis.iter().enumerate() {
                let c = dot(b, &q);
                r[k] += c;
                q.iter_mut().zip(b).for_each(|(qv, bv)| *qv -= bv * c);
            }
        }
        let qn = norm(&q);
        if qn <= T::lit(1e-10) * op.column_norms[j] {
            flagged = true;
            break;
        }
        q.iter_mut().for_each(|v| *v = *v / qn);
        r[basis.len()] = Complex::new(qn, T::zero());
        let c = dot(&q, &residual);
        residual.iter_mut().zip(&q).for_each(|(rv, qv)| *rv -= qv * c);
        basis.push(q);
        r_cols.push(r);
        support.push(j);
        residual_history.push(norm(&residual));
    }

    // back substitution R x = Qᴴ y
    let k = support.len();
    let qty: Vec<Complex<T>> = basis.iter().map(|b| dot(b, y)).collect();
    let mut coeffs = vec![zero; k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in i + 1..k {
            s -= r_cols[j][i] * coeffs[j];
        }
        coeffs[i] = s / r_cols[i][i];
    }

    let mut h_hat = vec![zero; dict.atoms.rows];
    for (&s, x) in support.iter().zip(&coeffs) {
        for (i, h) in h_hat.iter_mut().enumerate() {
            *h += dict.atoms.get(i, s) * x;
        }
    }
    Ok(SubcarrierEstimate {
        h_hat,
        diagnostics: Diagnostics {
            residual_norm: residual_history.last().unwrap().as_f64(),
            iterations: support.len(),
            support,
            flagged,
            residual_history: residual_history.iter().map(|r| r.as_f64()).collect(),
        },
    })
}
