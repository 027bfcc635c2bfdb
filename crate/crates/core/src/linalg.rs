//! Small dense real/complex matrices and the few factorizations the
//! estimators need.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_complex(&self) -> CMatrix<T> {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| Complex::new(x, T::zero())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("complex matrix", rows * cols, data.len()));
        }
        Ok(CMatrix { rows, cols, data })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<Complex<T>>]) -> Result<Self> {
        let mut m = Self::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::shape("matrix column", rows, col.len()));
            }
            for (i, &z) in col.iter().enumerate() {
                m.data[i * columns.len() + j] = z;
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, z: Complex<T>) {
        self.data[i * self.cols + j] = z;
    }

    pub fn column(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// `M x`.
    pub fn matvec(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᴴ y`.
    pub fn adjoint_matvec(&self, y: &[Complex<T>]) -> Vec<Complex<T>> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![Complex::new(T::zero(), T::zero()); self.cols];
        for (row, &yi) in self.data.chunks(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a.conj() * yi;
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j).conj();
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.re == T::zero() && a.im == T::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Largest squared singular value `‖M‖₂²` by power iteration on `MᴴM`.
    pub fn spectral_norm_sqr(&self) -> T {
        if self.rows == 0 || self.cols == 0 {
            return T::zero();
        }
        // Deterministic, non-degenerate start vector.
        let mut v: Vec<Complex<T>> = (0..self.cols)
            .map(|i| Complex::new(T::one() + T::lit(0.1 * ((i * 7919) % 13) as f64), T::lit(0.01 * i as f64)))
            .collect();
        let mut estimate = T::zero();
        for _ in 0..500 {
            let nv = crate::scalar::norm(&v);
            if nv == T::zero() {
                return T::zero();
            }
            v.iter_mut().for_each(|z| *z = *z / nv);
            let w = self.adjoint_matvec(&self.matvec(&v));
            let next = crate::scalar::norm(&w);
            let done = (next - estimate).abs() <= T::lit(1e-12) * next;
            estimate = next;
            v = w;
            if done {
                break;
            }
        }
        estimate
    }
}

/// Outcome of a Hermitian positive-semidefinite solve.
#[derive(Debug, Clone)]
pub struct HermitianSolve<T> {
    pub x: Vec<Complex<T>>,
    pub rank: usize,
    /// The matrix was numerically rank deficient; `x` is the solution on the
    /// leading pivoted block.
    pub rank_deficient: bool,
}

/// Solves `M x = b` for Hermitian PSD `M` with diagonally pivoted Cholesky.
///
/// Pivots whose remaining diagonal falls below `rel_tol · max diag` are
/// dropped; the corresponding unknowns are set to zero. For consistent
/// right-hand sides this yields an exact solution of the singular system.
pub fn hermitian_psd_solve<T: Real>(m: &CMatrix<T>, b: &[Complex<T>], rel_tol: T) -> Result<HermitianSolve<T>> {
    let n = m.rows;
    if m.cols != n || b.len() != n {
        return Err(Error::shape("hermitian solve", n, b.len()));
    }
    let zero = Complex::new(T::zero(), T::zero());
    let mut a = m.data.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let max_diag = (0..n).map(|i| m.get(i, i).re).fold(T::zero(), T::max);
    let floor = rel_tol * max_diag;
    let mut rank = 0;
    // In-place pivoted Cholesky: lower triangle of `a` holds L for the
    // permuted matrix.
    for k in 0..n {
        let (piv, dmax) = (k..n)
            .map(|i| (i, a[i * n + i].re))
            .fold((k, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(dmax > floor) || dmax <= T::zero() {
            break;
        }
        if piv != k {
            // symmetric row/column swap
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            for i in 0..n {
                a.swap(i * n + k, i * n + piv);
            }
            perm.swap(k, piv);
        }
        let lkk = a[k * n + k].re.sqrt();
        a[k * n + k] = Complex::new(lkk, T::zero());
        for i in k + 1..n {
            a[i * n + k] = a[i * n + k] / lkk;
        }
        // the whole trailing block stays current so later pivot swaps
        // never pull stale entries into the lower triangle
        for j in k + 1..n {
            let ljk = a[j * n + k];
            a[k * n + j] = zero;
            for i in k + 1..n {
                let lik = a[i * n + k];
                a[i * n + j] -= lik * ljk.conj();
            }
        }
        rank += 1;
    }
    let r = rank;
    // forward: L11 w = P b (first r entries)
    let pb: Vec<Complex<T>> = perm.iter().map(|&p| b[p]).collect();
    let mut w = vec![zero; r];
    for i in 0..r {
        let mut s = pb[i];
        for j in 0..i {
            s -= a[i * n + j] * w[j];
        }
        w[i] = s / a[i * n + i].re;
    }
    // backward: L11ᴴ x1 = w
    let mut x1 = vec![zero; r];
    for i in (0..r).rev() {
        let mut s = w[i];
        for j in i + 1..r {
            s -= a[j * n + i].conj() * x1[j];
        }
        x1[i] = s / a[i * n + i].re;
    }
    let mut x = vec![zero; n];
    for (i, &v) in x1.iter().enumerate() {
        x[perm[i]] = v;
    }
    if x.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NonFinite("hermitian solve".into()));
    }
    Ok(HermitianSolve {
        x,
        rank,
        rank_deficient: rank < n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn solves_full_rank_hermitian_system() {
        // M = B Bᴴ + I for a fixed B
        let b = CMatrix::from_vec(3, 2, vec![c(1.0, 0.5), c(0.0, 1.0), c(2.0, -1.0), c(0.3, 0.0), c(-1.0, 0.2), c(0.5, 0.5)]).unwrap();
        let mut m = b.matmul(&b.adjoint()).unwrap();
        for i in 0..3 {
            m.data[i * 3 + i] += c(1.0, 0.0);
        }
        let x_true = vec![c(1.0, -2.0), c(0.5, 0.5), c(-1.0, 0.0)];
        let rhs = m.matvec(&x_true);
        let sol = hermitian_psd_solve(&m, &rhs, 1e-12).unwrap();
        assert_eq!(sol.rank, 3);
        assert!(!sol.rank_deficient);
        for (a, b) in sol.x.iter().zip(&x_true) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn pivoting_on_larger_systems_keeps_the_factor_consistent() {
        // graded diagonal forces a pivot swap at nearly every step
        use rand::Rng;
        let mut rng = crate::rng::stream(4, "solve", 0);
        let n = 24;
        let b = CMatrix::from_vec(n, n, (0..n * n).map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect()).unwrap();
        let mut m = b.matmul(&b.adjoint()).unwrap();
        for i in 0..n {
            m.data[i * n + i] += c(0.1 * ((i * 7) % n) as f64, 0.0);
        }
        let x_true: Vec<_> = (0..n).map(|i| c(i as f64 * 0.1, 1.0 - i as f64 * 0.05)).collect();
        let rhs = m.matvec(&x_true);
        let sol = hermitian_psd_solve(&m, &rhs, 1e-14).unwrap();
        assert_eq!(sol.rank, n);
        for (a, b) in sol.x.iter().zip(&x_true) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn rank_deficient_consistent_system_is_solved() {
        let v = vec![c(1.0, 1.0), c(2.0, 0.0), c(0.0, -1.0)];
        let m = CMatrix::from_columns(3, &[v.clone()]).unwrap();
        let m = m.matmul(&m.adjoint()).unwrap();
        let rhs: Vec<_> = v.iter().map(|z| z * c(3.0, -1.0)).collect();
        let sol = hermitian_psd_solve(&m, &rhs, 1e-10).unwrap();
        assert_eq!(sol.rank, 1);
        assert!(sol.rank_deficient);
        let back = m.matvec(&sol.x);
        for (a, b) in back.iter().zip(&rhs) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let mut m = CMatrix::<f64>::zeros(3, 3);
        m.set(0, 0, c(1.0, 0.0));
        m.set(1, 1, c(0.0, -3.0));
        m.set(2, 2, c(2.0, 0.0));
        assert!((m.spectral_norm_sqr() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn adjoint_matvec_matches_explicit_adjoint() {
        let m = CMatrix::from_vec(2, 3, vec![c(1.0, 2.0), c(0.0, 1.0), c(3.0, 0.0), c(-1.0, 0.0), c(2.0, 2.0), c(0.0, -1.0)]).unwrap();
        let y = vec![c(0.5, 1.0), c(-2.0, 0.25)];
        let a = m.adjoint_matvec(&y);
        let b = m.adjoint().matvec(&y);
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).norm() < 1e-14);
        }
    }
}
