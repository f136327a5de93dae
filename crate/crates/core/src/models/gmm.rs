use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_theta, Capabilities, Evaluation, ObjectiveModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::numdiff;
use crate::resampling::BatchSelector;

/// Per-observation moment conditions `g_i(θ) ∈ R^q`.
pub trait MomentFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn n_moments(&self) -> usize;
    fn n_obs(&self) -> usize;

    fn moment(&self, theta: &DVector<f64>, i: usize) -> Result<DVector<f64>>;

    /// Analytic `∂g_i/∂θ′` (q × d), if available.
    fn moment_jacobian(&self, _theta: &DVector<f64>, _i: usize) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// How the GMM Hessian is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmHessian {
    /// `2 J′WJ`; exact when the moments are linear in θ.
    #[default]
    GaussNewton,
    /// Central-difference Jacobian of the gradient.
    FiniteDifference,
}

/// Quadratic-form criterion `Q(θ) = ḡ(θ)′ W ḡ(θ)` with ḡ the batch-averaged moments.
pub struct Gmm<F> {
    moments: F,
    w: DMatrix<f64>,
    hessian: GmmHessian,
}

impl<F: MomentFunction> Gmm<F> {
    pub fn new(moments: F, w: DMatrix<f64>) -> Result<Self> {
        let q = moments.n_moments();
        if w.shape() != (q, q) {
            return Err(Error::Model(format!("weight matrix is {:?}, expected {q}×{q}", w.shape())));
        }
        if q < moments.dim() {
            return Err(Error::Model(format!("{q} moments cannot identify {} parameters", moments.dim())));
        }
        let scale = w.amax().max(f64::MIN_POSITIVE);
        if (&w - w.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Model("weight matrix is not symmetric".into()));
        }
        let ev = linalg::sym_eigenvalues(&w);
        if ev[0] < -1e-10 * scale {
            return Err(Error::Model(format!("weight matrix is not positive semi-definite (spectrum {ev:?})")));
        }
        Ok(Self {
            moments,
            w,
            hessian: GmmHessian::default(),
        })
    }

    pub fn with_hessian(mut self, hessian: GmmHessian) -> Self {
        self.hessian = hessian;
        self
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn moments(&self) -> &F {
        &self.moments
    }

    /// Batch-averaged moment vector ḡ(θ).
    pub fn mean_moment(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.moments.n_moments());
        let mut failure = None;
        batch.for_each(|i, w| {
            if failure.is_some() {
                return;
            }
            match self.moments.moment(theta, i) {
                Ok(gi) if gi.iter().all(|v| v.is_finite()) => g.axpy(w, &gi, 1.0),
                Ok(_) => failure = Some(Error::evaluation(theta, Some(i), "non-finite moment")),
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(g / batch.total_weight()),
        }
    }

    /// Batch-averaged moment Jacobian, analytic when supplied, else central differences.
    pub fn mean_jacobian(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DMatrix<f64>> {
        if self.moments.n_obs() > 0 && self.moments.moment_jacobian(theta, 0).is_some() {
            let mut j = DMatrix::zeros(self.moments.n_moments(), self.moments.dim());
            let mut failure = None;
            batch.for_each(|i, w| {
                if failure.is_some() {
                    return;
                }
                match self.moments.moment_jacobian(theta, i) {
                    Some(Ok(ji)) => j += ji * w,
                    Some(Err(e)) => failure = Some(e),
                    None => failure = Some(Error::Capability("analytic moment Jacobian for every observation")),
                }
            });
            return match failure {
                Some(e) => Err(e),
                None => Ok(j / batch.total_weight()),
            };
        }
        numdiff::jacobian(|t| self.mean_moment(t, batch), theta)
    }
}

impl<F: MomentFunction> ObjectiveModel for Gmm<F> {
    fn dim(&self) -> usize {
        self.moments.dim()
    }

    fn n_obs(&self) -> usize {
        self.moments.n_obs()
    }

    fn capabilities(&self) -> Capabilities {
        let analytic = self.moments.n_obs() > 0 && self.moments.moment_jacobian(&DVector::zeros(self.moments.dim()), 0).is_some();
        Capabilities {
            analytic_gradient: analytic,
            analytic_hessian: false,
            per_observation_score: false,
        }
    }

    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation> {
        check_theta(theta, self.dim())?;
        batch.validate(self.n_obs())?;
        let g = self.mean_moment(theta, batch)?;
        let j = self.mean_jacobian(theta, batch)?;
        let wg = &self.w * &g;
        let value = g.dot(&wg);
        let gradient = j.transpose() * wg * 2.0;
        let hessian = match self.hessian {
            GmmHessian::GaussNewton => {
                let h = j.transpose() * &self.w * &j * 2.0;
                (&h + h.transpose()) * 0.5
            }
            GmmHessian::FiniteDifference => numdiff::hessian_from_gradient(|t| self.gradient(t, batch), theta)?,
        };
        super::check_evaluation(
            theta,
            Evaluation {
                value,
                gradient,
                hessian,
                clamped: 0,
            },
        )
    }

    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        check_theta(theta, self.dim())?;
        batch.validate(self.n_obs())?;
        let g = self.mean_moment(theta, batch)?;
        Ok(g.dot(&(&self.w * &g)))
    }

    fn gradient(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<DVector<f64>> {
        check_theta(theta, self.dim())?;
        batch.validate(self.n_obs())?;
        let g = self.mean_moment(theta, batch)?;
        let j = self.mean_jacobian(theta, batch)?;
        Ok(j.transpose() * (&self.w * g) * 2.0)
    }
}

/// Linear instrumental moments `g_i(θ) = z_i (y_i − x_i′θ)`.
#[derive(Clone, Debug)]
pub struct LinearMoments {
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl LinearMoments {
    pub fn new(z: DMatrix<f64>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if z.nrows() != x.nrows() || x.nrows() != y.len() {
            return Err(Error::Model("instrument, regressor and response row counts differ".into()));
        }
        Ok(Self { z, x, y })
    }
}

impl MomentFunction for LinearMoments {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn n_moments(&self) -> usize {
        self.z.ncols()
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn moment(&self, theta: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        let resid = self.y[i] - self.x.row(i).dot(&theta.transpose());
        Ok(self.z.row(i).transpose() * resid)
    }

    fn moment_jacobian(&self, _theta: &DVector<f64>, i: usize) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(-(self.z.row(i).transpose() * self.x.row(i))))
    }
}
