use nalgebra::{DMatrix, DVector};

use super::{check_theta, Accumulator, Capabilities, DataSet, Evaluation, ObjectiveModel};
use crate::error::{Error, Result};
use crate::resampling::BatchSelector;

/// Residuals beyond this magnitude are treated as a blown-up recursion.
const OVERFLOW: f64 = 1e150;

/// MA(1) regression `y_t = μ + e_t + ψ e_{t−1}` fitted by nonlinear least
/// squares on the filtered residuals `e_t(θ) = y_t − μ − ψ e_{t−1}(θ)`,
/// with `e_0 = 0` before the first observation. θ = (μ, ψ).
///
/// The recursion always runs over the whole series; a batch selects which
/// periods' squared residuals enter the average.
#[derive(Clone, Debug)]
pub struct Ma1 {
    y: Vec<f64>,
}

/// Filtered residuals and their first and second derivatives.
#[derive(Clone, Debug, Default)]
pub struct Ma1Filter {
    pub e: Vec<f64>,
    /// ∂e_t/∂μ
    pub de_dmu: Vec<f64>,
    /// ∂e_t/∂ψ
    pub de_dpsi: Vec<f64>,
    /// ∂²e_t/∂μ∂ψ
    pub d2e_dmu_dpsi: Vec<f64>,
    /// ∂²e_t/∂ψ²
    pub d2e_dpsi2: Vec<f64>,
}

impl Ma1 {
    pub fn new(series: &[f64]) -> Result<Self> {
        if series.len() < 2 {
            return Err(Error::Model(format!("MA(1) needs at least 2 observations, got {}", series.len())));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("MA(1) series contains non-finite values".into()));
        }
        Ok(Self { y: series.to_vec() })
    }

    pub fn from_dataset(data: &DataSet) -> Result<Self> {
        let y = data.response_column()?;
        Self::new(y.as_slice())
    }

    pub fn series(&self) -> &[f64] {
        &self.y
    }

    /// Residuals only.
    pub fn residuals(&self, theta: &DVector<f64>) -> Result<Vec<f64>> {
        check_theta(theta, 2)?;
        let (mu, psi) = (theta[0], theta[1]);
        let mut e = Vec::with_capacity(self.y.len());
        let mut prev = 0.0;
        for (t, y) in self.y.iter().enumerate() {
            prev = y - mu - psi * prev;
            if !prev.is_finite() || prev.abs() > OVERFLOW {
                return Err(Error::evaluation(theta, Some(t), "MA(1) residual recursion overflowed"));
            }
            e.push(prev);
        }
        Ok(e)
    }

    /// Runs the residual and derivative recursions.
    pub fn filter(&self, theta: &DVector<f64>) -> Result<Ma1Filter> {
        check_theta(theta, 2)?;
        let (mu, psi) = (theta[0], theta[1]);
        let n = self.y.len();
        let mut f = Ma1Filter {
            e: Vec::with_capacity(n),
            de_dmu: Vec::with_capacity(n),
            de_dpsi: Vec::with_capacity(n),
            d2e_dmu_dpsi: Vec::with_capacity(n),
            d2e_dpsi2: Vec::with_capacity(n),
        };
        let (mut e, mut a, mut c, mut r, mut s) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (t, y) in self.y.iter().enumerate() {
            let e1 = y - mu - psi * e;
            let a1 = -1.0 - psi * a;
            let c1 = -e - psi * c;
            let r1 = -a - psi * r;
            let s1 = -2.0 * c - psi * s;
            (e, a, c, r, s) = (e1, a1, c1, r1, s1);
            if [e, a, c, r, s].iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW) {
                return Err(Error::evaluation(theta, Some(t), "MA(1) residual recursion overflowed"));
            }
            f.e.push(e);
            f.de_dmu.push(a);
            f.de_dpsi.push(c);
            f.d2e_dmu_dpsi.push(r);
            f.d2e_dpsi2.push(s);
        }
        Ok(f)
    }
}

impl ObjectiveModel for Ma1 {
    fn dim(&self) -> usize {
        2
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            analytic_gradient: true,
            analytic_hessian: true,
            per_observation_score: true,
        }
    }

    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation> {
        batch.validate(self.y.len())?;
        let f = self.filter(theta)?;
        let mut acc = Accumulator::new(2);
        batch.for_each(|t, w| {
            let (e, a, c, r, s) = (f.e[t], f.de_dmu[t], f.de_dpsi[t], f.d2e_dmu_dpsi[t], f.d2e_dpsi2[t]);
            let g = [2.0 * e * a, 2.0 * e * c];
            let h = [2.0 * a * a, 2.0 * (a * c + e * r), 0.0, 2.0 * (c * c + e * s)];
            acc.add_general(w, e * e, &g, &h);
        });
        super::check_evaluation(theta, acc.finish(batch.total_weight(), 0))
    }

    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        batch.validate(self.y.len())?;
        let e = self.residuals(theta)?;
        let mut q = 0.0;
        batch.for_each(|t, w| q += w * e[t] * e[t]);
        Ok(q / batch.total_weight())
    }

    fn scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.filter(theta)?;
        Ok(DMatrix::from_fn(self.y.len(), 2, |t, j| {
            2.0 * f.e[t] * if j == 0 { f.de_dmu[t] } else { f.de_dpsi[t] }
        }))
    }
}
