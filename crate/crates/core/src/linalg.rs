//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which an unpenalized system is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Solves `a x = b` for symmetric positive-definite `a`.
///
/// With `penalty == 0` the spectral condition number is checked first and the
/// call fails above [`MAX_CONDITION`] instead of returning a noisy answer.
pub fn spd_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    context: &str,
    penalty: f64,
) -> Result<DMatrix<f64>> {
    if penalty == 0.0 {
        let (lo, hi) = eigen_range(a);
        if !(lo > 0.0) || hi / lo > MAX_CONDITION {
            return Err(Error::singular(context, penalty));
        }
    }
    let chol = Cholesky::new(a.clone()).ok_or_else(|| Error::singular(context, penalty))?;
    let x = chol.solve(b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::singular(context, penalty))
    }
}

pub fn spd_solve_vec(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    context: &str,
    penalty: f64,
) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = spd_solve(a, &rhs, context, penalty)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = Cholesky::new(a.clone())?.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Some(symmetrize(&inv))
    } else {
        None
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}

/// `n` points spaced evenly on a log scale from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Composite trapezoid rule on an even grid of `y.len()` points over [0, 1].
pub fn trapezoid(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let h = 1.0 / (n - 1) as f64;
    let inner: f64 = y[1..n - 1].iter().sum();
    h * (inner + 0.5 * (y[0] + y[n - 1]))
}
