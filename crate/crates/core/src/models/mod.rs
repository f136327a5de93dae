//! Objective models: value, gradient and Hessian of a sample criterion,
//! evaluated on a batch of observations.
//!
//! Every model averages over the batch: index batches divide by the number
//! of indices, weight batches by the total weight. Minimization is the
//! convention throughout, so likelihood models expose the negative
//! log-likelihood.

mod dataset;
mod gmm;
mod ma1;
mod ols;
mod probit;

pub use dataset::{ColumnRoles, DataSet};
pub use gmm::{Gmm, GmmHessian, LinearMoments, MomentFunction};
pub use ma1::{Ma1, Ma1Filter};
pub use ols::Ols;
pub use probit::{Probit, ProbitMode};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numdiff;
use crate::resampling::BatchSelector;

/// Which derivatives a model computes analytically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub analytic_gradient: bool,
    pub analytic_hessian: bool,
    pub per_observation_score: bool,
}

/// Batch-averaged value, gradient and Hessian at one parameter value.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// Observations whose contribution hit a numerical clamp.
    pub clamped: usize,
}

pub trait ObjectiveModel: Send + Sync {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    /// Number of observations `n`.
    fn n_obs(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation>;

    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        Ok(self.evaluate(theta, batch)?.value)
    }

    fn gradient(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DVector<f64>> {
        Ok(self.evaluate(theta, batch)?.gradient)
    }

    /// Per-observation score contributions `G_i(θ)` as an `n × d` matrix whose
    /// column means equal the full-sample gradient.
    fn scores(&self, _theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Err(Error::Capability("per-observation scores"))
    }

    fn full_batch(&self) -> BatchSelector {
        BatchSelector::full(self.n_obs())
    }
}

impl<T: ObjectiveModel + ?Sized> ObjectiveModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_obs(&self) -> usize {
        (**self).n_obs()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation> {
        (**self).evaluate(theta, batch)
    }
    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        (**self).value(theta, batch)
    }
    fn gradient(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DVector<f64>> {
        (**self).gradient(theta, batch)
    }
    fn scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).scores(theta)
    }
}

impl<T: ObjectiveModel + ?Sized> ObjectiveModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_obs(&self) -> usize {
        (**self).n_obs()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation> {
        (**self).evaluate(theta, batch)
    }
    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        (**self).value(theta, batch)
    }
    fn gradient(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DVector<f64>> {
        (**self).gradient(theta, batch)
    }
    fn scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).scores(theta)
    }
}

/// Finite-difference Hessian of the batch gradient (symmetrized).
pub fn fd_hessian<M: ObjectiveModel + ?Sized>(model: &M, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DMatrix<f64>> {
    numdiff::hessian_from_gradient(|t| model.gradient(t, batch), theta)
}

pub(crate) fn check_theta(theta: &DVector<f64>, d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::Config(format!("parameter has length {}, model expects {d}", theta.len())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::evaluation(theta, None, "non-finite parameter"));
    }
    Ok(())
}

/// Accumulator for batch-averaged value, gradient and upper-triangular Hessian.
pub(crate) struct Accumulator {
    d: usize,
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl Accumulator {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            d,
            value: 0.0,
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
        }
    }

    /// Adds `w·(q, s·u, h·u u′)` for a contribution whose gradient is a multiple of one vector.
    #[inline]
    pub(crate) fn add_rank_one(&mut self, w: f64, q: f64, s: f64, h: f64, u: &[f64]) {
        let d = self.d;
        self.value += w * q;
        let ws = w * s;
        let wh = w * h;
        for j in 0..d {
            self.grad[j] += ws * u[j];
            let a = wh * u[j];
            let row = &mut self.hess[j * d..(j + 1) * d];
            for k in j..d {
                row[k] += a * u[k];
            }
        }
    }

    #[inline]
    pub(crate) fn add_general(&mut self, w: f64, q: f64, g: &[f64], h: &[f64]) {
        let d = self.d;
        self.value += w * q;
        for j in 0..d {
            self.grad[j] += w * g[j];
            for k in j..d {
                self.hess[j * d + k] += w * h[j * d + k];
            }
        }
    }

    pub(crate) fn finish(self, total_weight: f64, clamped: usize) -> Evaluation {
        let d = self.d;
        let mut hessian = DMatrix::zeros(d, d);
        for j in 0..d {
            for k in j..d {
                let v = self.hess[j * d + k] / total_weight;
                hessian[(j, k)] = v;
                hessian[(k, j)] = v;
            }
        }
        Evaluation {
            value: self.value / total_weight,
            gradient: DVector::from_iterator(d, self.grad.into_iter().map(|g| g / total_weight)),
            hessian,
            clamped,
        }
    }
}

pub(crate) fn check_evaluation(theta: &DVector<f64>, e: Evaluation) -> Result<Evaluation> {
    if !e.value.is_finite() || e.gradient.iter().any(|v| !v.is_finite()) || e.hessian.iter().any(|v| !v.is_finite()) {
        return Err(Error::evaluation(theta, None, "non-finite objective, gradient or Hessian"));
    }
    Ok(e)
}
