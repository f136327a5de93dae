//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Solve `A x = b` for symmetric `A`: Cholesky first, pivoted LU as fallback.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let x = a.clone().full_piv_lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solve `A X = B` column by column with the same strategy.
pub fn solve_symmetric_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let x = a.clone().full_piv_lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Sample covariance of the rows of `draws`, denominator `rows − ddof`.
pub fn covariance(draws: &DMatrix<f64>, ddof: usize) -> DMatrix<f64> {
    let (b, d) = draws.shape();
    let mean = column_means(draws);
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..b {
        let dev = draws.row(r).transpose() - &mean;
        cov.ger(1.0, &dev, &dev, 1.0);
    }
    let denom = (b - ddof.min(b.saturating_sub(1))) as f64;
    cov / denom
}

pub fn column_means(draws: &DMatrix<f64>) -> DVector<f64> {
    let b = draws.nrows() as f64;
    DVector::from_iterator(draws.ncols(), draws.column_iter().map(|c| c.sum() / b))
}

/// Quantile with linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

/// Inverse of a symmetric positive definite matrix; errors with the spectrum otherwise.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    solve_symmetric_matrix(a, &DMatrix::identity(d, d)).ok_or_else(|| Error::SingularVariance {
        spectrum: sym_eigenvalues(a),
    })
}
