//! Dense complex helpers on top of nalgebra.
//!
//! Everything here works on small Hermitian matrices (at most a few dozen
//! rows), so clarity wins over blocking or in-place tricks.

use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// `(a + a^H) / 2`, used to scrub rounding asymmetry before eigensolves.
pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.norm().max(1.0);
    (a - a.adjoint()).norm() <= tol * scale
}

/// Eigen-decomposition of a Hermitian matrix.
///
/// Eigenvalues are sorted in descending order. Each eigenvector is scaled to
/// unit norm and rotated so that its first non-negligible entry is real and
/// positive, which makes the basis deterministic up to exact ties.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

pub fn hermitian_eigen(a: &CMat) -> HermitianEigen {
    let n = a.nrows();
    if n == 0 {
        return HermitianEigen {
            values: Vec::new(),
            vectors: CMat::zeros(0, 0),
        };
    }
    let eig = hermitian_part(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut vectors = CMat::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col: CVec = eig.eigenvectors.column(src).into_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col.unscale_mut(norm);
        }
        if let Some(lead) = col.iter().find(|z| z.norm() > 1e-12).copied() {
            let phase = lead.conj() / lead.norm();
            col.iter_mut().for_each(|z| *z *= phase);
        }
        vectors.set_column(dst, &col);
    }
    HermitianEigen { values, vectors }
}

pub fn min_eigenvalue(a: &CMat) -> f64 {
    hermitian_eigen(a)
        .values
        .last()
        .copied()
        .unwrap_or(0.0)
}

/// Hermitian PSD square root; negative rounding eigenvalues are clamped to zero.
pub fn psd_sqrt(a: &CMat) -> CMat {
    let HermitianEigen { values, vectors } = hermitian_eigen(a);
    let roots: Vec<Complex64> = values.iter().map(|&l| c(l.max(0.0).sqrt(), 0.0)).collect();
    &vectors * CMat::from_diagonal(&CVec::from_vec(roots)) * vectors.adjoint()
}

/// Hermitian inverse square root of a positive-definite matrix.
pub fn pd_inv_sqrt(a: &CMat) -> Result<CMat> {
    if !is_hermitian(a, 1e-10) {
        return Err(Error::Numeric("matrix is not Hermitian".into()));
    }
    let HermitianEigen { values, vectors } = hermitian_eigen(a);
    let top = values.first().copied().unwrap_or(0.0);
    let bottom = values.last().copied().unwrap_or(0.0);
    if bottom <= 1e-14 * top.max(f64::MIN_POSITIVE) || bottom <= 0.0 {
        return Err(Error::Numeric(format!(
            "matrix is not positive definite (smallest eigenvalue {bottom:e})"
        )));
    }
    let inv_roots: Vec<Complex64> = values.iter().map(|&l| c(1.0 / l.sqrt(), 0.0)).collect();
    Ok(&vectors * CMat::from_diagonal(&CVec::from_vec(inv_roots)) * vectors.adjoint())
}

/// Solves `a x = b` for Hermitian positive-definite `a`.
pub fn hpd_solve(a: &CMat, b: &CMat) -> Result<CMat> {
    let chol = hermitian_part(a)
        .cholesky()
        .ok_or_else(|| Error::Numeric("Cholesky factorization failed".into()))?;
    Ok(chol.solve(b))
}

pub fn hpd_solve_vec(a: &CMat, b: &CVec) -> Result<CVec> {
    let chol = hermitian_part(a)
        .cholesky()
        .ok_or_else(|| Error::Numeric("Cholesky factorization failed".into()))?;
    Ok(chol.solve(b))
}

pub fn hpd_inverse(a: &CMat) -> Result<CMat> {
    let chol = hermitian_part(a)
        .cholesky()
        .ok_or_else(|| Error::Numeric("Cholesky factorization failed".into()))?;
    Ok(chol.inverse())
}

/// `log2 det a` for Hermitian positive-definite `a`, via the Cholesky diagonal.
pub fn log2_det_hpd(a: &CMat) -> Result<f64> {
    let chol = hermitian_part(a)
        .cholesky()
        .ok_or_else(|| Error::Numeric("Cholesky factorization failed".into()))?;
    let l = chol.l_dirty();
    Ok((0..a.nrows()).map(|i| 2.0 * l[(i, i)].re.log2()).sum())
}

/// Moore-Penrose pseudo-inverse of a Hermitian PSD matrix. Eigenvalues below
/// `1e-12 * max(1, largest)` are treated as zero.
pub fn psd_pinv(a: &CMat) -> CMat {
    let HermitianEigen { values, vectors } = hermitian_eigen(a);
    let cutoff = 1e-12 * values.first().copied().unwrap_or(0.0).max(1.0);
    let inv: Vec<Complex64> = values
        .iter()
        .map(|&l| if l > cutoff { c(1.0 / l, 0.0) } else { ZERO })
        .collect();
    &vectors * CMat::from_diagonal(&CVec::from_vec(inv)) * vectors.adjoint()
}

/// Real part of `x^H a x`.
pub fn quad_form(a: &CMat, x: &CVec) -> f64 {
    x.dotc(&(a * x)).re
}

pub fn frobenius_sq(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn real_trace(a: &CMat) -> f64 {
    a.trace().re
}
