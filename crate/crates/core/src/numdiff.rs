//! Finite-difference derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Relative step used by the central-difference defaults.
pub const CENTRAL_REL_STEP: f64 = 1e-6;

#[inline]
pub fn central_step(x: f64) -> f64 {
    CENTRAL_REL_STEP * x.abs().max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn gradient<F>(f: F, theta: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(theta.len());
    let mut t = theta.clone();
    for j in 0..theta.len() {
        let h = central_step(theta[j]);
        t[j] = theta[j] + h;
        let up = f(&t)?;
        t[j] = theta[j] - h;
        let down = f(&t)?;
        t[j] = theta[j];
        g[j] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Jacobian (rows: outputs, columns: parameters).
pub fn jacobian<F>(f: F, theta: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut t = theta.clone();
    let mut cols = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let h = central_step(theta[j]);
        t[j] = theta[j] + h;
        let up = f(&t)?;
        t[j] = theta[j] - h;
        let down = f(&t)?;
        t[j] = theta[j];
        cols.push((up - down) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Forward-difference Jacobian with step `rel · (1 + |θ_j|)`, given the value at `theta`.
pub fn forward_jacobian<F>(f: F, theta: &DVector<f64>, at_theta: &DVector<f64>, rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut t = theta.clone();
    let mut cols = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let h = rel * (1.0 + theta[j].abs());
        t[j] = theta[j] + h;
        let up = f(&t)?;
        t[j] = theta[j];
        cols.push((up - at_theta) / h);
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Hessian as the symmetrized central-difference Jacobian of a gradient.
pub fn hessian_from_gradient<F>(grad: F, theta: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let j = jacobian(grad, theta)?;
    Ok((&j + j.transpose()) * 0.5)
}
