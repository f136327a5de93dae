use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{check_theta, Accumulator, Capabilities, DataSet, Evaluation, ObjectiveModel};
use crate::error::{Error, Result};
use crate::resampling::BatchSelector;

/// Lower clamp applied to Φ in the default mode; the upper clamp is `1 − PROB_CLAMP`.
pub const PROB_CLAMP: f64 = 1e-12;

/// What to do when a fitted probability is numerically 0 or 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbitMode {
    /// Clamp Φ to `[1e-12, 1 − 1e-12]` and count the event.
    #[default]
    Clamped,
    /// Return an evaluation error naming the observation.
    Strict,
}

/// Probit model; the objective is the average negative log-likelihood.
#[derive(Clone, Debug)]
pub struct Probit {
    n: usize,
    d: usize,
    x: Vec<f64>,
    /// Response recoded as ±1.
    sign: Vec<f64>,
    mode: ProbitMode,
}

pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub(crate) fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse Mills ratio φ(u)/Φ(u), stable far in the left tail.
pub(crate) fn mills(u: f64) -> f64 {
    if u > -30.0 {
        std_normal_pdf(u) / std_normal_cdf(u)
    } else {
        let r = 1.0 / (u * u);
        -u / (1.0 - r + 3.0 * r * r - 15.0 * r * r * r)
    }
}

impl Probit {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if n != y.len() {
            return Err(Error::Model(format!("design has {n} rows but response has {}", y.len())));
        }
        if n == 0 || d == 0 {
            return Err(Error::Model("probit needs at least one row and one column".into()));
        }
        let mut sign = Vec::with_capacity(n);
        for (i, &v) in y.iter().enumerate() {
            sign.push(match v {
                v if v == 1.0 => 1.0,
                v if v == 0.0 => -1.0,
                _ => return Err(Error::Model(format!("probit response must be 0 or 1, row {i} has {v}"))),
            });
        }
        let mut rows = Vec::with_capacity(n * d);
        for i in 0..n {
            rows.extend(x.row(i).iter());
        }
        Ok(Self {
            n,
            d,
            x: rows,
            sign,
            mode: ProbitMode::Clamped,
        })
    }

    pub fn from_dataset(data: &DataSet, regressors: &[String], intercept: bool) -> Result<Self> {
        Self::new(&data.design(regressors, intercept)?, &data.response_column()?)
    }

    pub fn with_mode(mut self, mode: ProbitMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> ProbitMode {
        self.mode
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    pub fn response(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, self.sign.iter().map(|s| if *s > 0.0 { 1.0 } else { 0.0 }))
    }

    /// Value, d/dz and d²/dz² of `−ln Φ(s z)` for one observation; flags a clamp.
    #[inline]
    fn contribution(&self, theta: &DVector<f64>, i: usize) -> Result<(f64, f64, f64, bool)> {
        let z: f64 = self.row(i).iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        let s = self.sign[i];
        let u = s * z;
        let p = std_normal_cdf(u);
        // Only the lower end makes the log-likelihood degenerate.
        let clamped = p < PROB_CLAMP;
        if clamped && self.mode == ProbitMode::Strict {
            return Err(Error::evaluation(theta, Some(i), format!("fitted probability {p:e} is numerically 0 or 1")));
        }
        let q = -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
        let lam = mills(u);
        Ok((q, -s * lam, lam * (u + lam), clamped))
    }
}

impl ObjectiveModel for Probit {
    fn dim(&self) -> usize {
        self.d
    }

    fn n_obs(&self) -> usize {
        self.n
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            analytic_gradient: true,
            analytic_hessian: true,
            per_observation_score: true,
        }
    }

    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation> {
        check_theta(theta, self.d)?;
        batch.validate(self.n)?;
        let mut acc = Accumulator::new(self.d);
        let mut clamped = 0;
        let mut failure = None;
        batch.for_each(|i, w| {
            if failure.is_some() {
                return;
            }
            match self.contribution(theta, i) {
                Ok((q, dz, d2z, c)) => {
                    clamped += usize::from(c);
                    acc.add_rank_one(w, q, dz, d2z, self.row(i));
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if clamped > 0 {
            log::debug!("probit: {clamped} fitted probabilities clamped");
        }
        super::check_evaluation(theta, acc.finish(batch.total_weight(), clamped))
    }

    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        check_theta(theta, self.d)?;
        batch.validate(self.n)?;
        let mut q = 0.0;
        let mut failure = None;
        batch.for_each(|i, w| {
            if failure.is_none() {
                match self.contribution(theta, i) {
                    Ok(c) => q += w * c.0,
                    Err(e) => failure = Some(e),
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(q / batch.total_weight()),
        }
    }

    fn scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_theta(theta, self.d)?;
        let mut s = DMatrix::zeros(self.n, self.d);
        for i in 0..self.n {
            let (_, dz, _, _) = self.contribution(theta, i)?;
            for (j, x) in self.row(i).iter().enumerate() {
                s[(i, j)] = dz * x;
            }
        }
        Ok(s)
    }
}
