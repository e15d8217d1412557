//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{ComplexField, DMatrix, RealField};

use crate::error::{Error, Result};

/// Solve `a * x = b` for Hermitian positive definite `a`.
///
/// Uses a Cholesky factorization. If that fails, `1e-10 * tr(a) / dim` is
/// added to the diagonal and the factorization is retried once.
pub fn spd_solve<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64>,
{
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let dim = a.nrows().max(1);
    let trace: f64 = (0..a.nrows()).map(|i| a[(i, i)].clone().real()).sum();
    let jitter = if trace > 0.0 { 1e-10 * trace / dim as f64 } else { 1e-10 };
    log::warn!("cholesky failed on {dim}x{dim} system, retrying with jitter {jitter:e}");
    let mut regularized = a.clone();
    for i in 0..a.nrows() {
        regularized[(i, i)] += T::from_real(jitter);
    }
    regularized.cholesky().map(|chol| chol.solve(b)).ok_or(Error::Singular)
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&roots) * v.transpose()
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue<T>(a: &DMatrix<T>) -> f64
where
    T: ComplexField<RealField = f64>,
{
    let sym = (a + a.adjoint()).scale(0.5);
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn check_psd<T>(a: &DMatrix<T>, tol: f64) -> Result<()>
where
    T: ComplexField<RealField = f64>,
{
    let min = min_eigenvalue(a);
    if min < -tol {
        Err(Error::NotPsd(min))
    } else {
        Ok(())
    }
}

pub fn kron<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T>
where
    T: ComplexField,
{
    a.kronecker(b)
}

pub fn trace<T: RealField + Copy>(a: &DMatrix<T>) -> T {
    a.diagonal().sum()
}
