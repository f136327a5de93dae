//! Comparison estimators: m-of-n bootstrap, k-step Newton bootstrap,
//! score (Rademacher) bootstrap and the MA(1) residual bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chains::minimize;
use crate::conditioning::{Conditioning, ConditioningKind};
use crate::error::{Error, Result};
use crate::inference::{summarize_bootstrap, InferenceReport};
use crate::models::{Ma1, ObjectiveModel};
use crate::resampling::{BatchSelector, ResamplePlan, RngStream};

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMethod {
    MofN,
    Dmk,
    Ks,
    StateSpaceMa1,
    Smd,
}

impl BootstrapMethod {
    pub fn tag(self) -> &'static str {
        match self {
            BootstrapMethod::MofN => "mofn",
            BootstrapMethod::Dmk => "dmk",
            BootstrapMethod::Ks => "ks",
            BootstrapMethod::StateSpaceMa1 => "state_space_ma1",
            BootstrapMethod::Smd => "smd_bootstrap",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BootstrapDraws {
    pub method: BootstrapMethod,
    /// One row per successful replication, in replication order.
    pub draws: DMatrix<f64>,
    /// θ̂ₙ.
    pub center: DVector<f64>,
    pub m: usize,
    pub n: usize,
    /// Replication index of each row.
    pub replication_ids: Vec<u64>,
    pub failures: usize,
    /// Replications whose Hessian needed the ridge repair.
    pub repairs: usize,
}

impl BootstrapDraws {
    /// SEs `√(m/n)·sd` and percentile intervals of `θ̂ + √(m/n)(θ_b − θ̂)`.
    /// Simulation-based replications are recentered at their own mean,
    /// which removes the simulation bias shared by every replication.
    pub fn report(&self, alpha: f64) -> Result<InferenceReport> {
        let center = match self.method {
            BootstrapMethod::Smd => crate::linalg::column_means(&self.draws),
            _ => self.center.clone(),
        };
        summarize_bootstrap(self.method.tag(), &self.draws, &self.center, &center, self.m, self.n, alpha)
    }
}

/// Settings for the per-replication optimizations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

pub(crate) fn collect(method: BootstrapMethod, center: &DVector<f64>, m: usize, n: usize, results: Vec<(u64, Option<(DVector<f64>, bool)>)>) -> Result<BootstrapDraws> {
    let total = results.len();
    let failures = results.iter().filter(|r| r.1.is_none()).count();
    let limit = (MAX_FAILURE_SHARE * total as f64).floor() as usize;
    if failures > limit {
        return Err(Error::Replications { failed: failures, total, limit });
    }
    if failures > 0 {
        log::warn!("{}: {failures} of {total} replications failed and were excluded", method.tag());
    }
    let d = center.len();
    let mut rows = Vec::with_capacity((total - failures) * d);
    let mut ids = Vec::with_capacity(total - failures);
    let mut repairs = 0;
    for (id, r) in results {
        if let Some((theta, repaired)) = r {
            rows.extend(theta.iter());
            ids.push(id);
            repairs += usize::from(repaired);
        }
    }
    Ok(BootstrapDraws {
        method,
        draws: DMatrix::from_row_slice(ids.len(), d, &rows),
        center: center.clone(),
        m,
        n,
        replication_ids: ids,
        failures,
        repairs,
    })
}

/// Full re-optimization on `B` resampled batches, warm-started at θ̂ₙ.
pub fn m_of_n_bootstrap<M: ObjectiveModel + ?Sized>(
    model: &M,
    theta_hat: &DVector<f64>,
    plan: &ResamplePlan,
    opt: OptimizerConfig,
    replications: usize,
    stream: &RngStream,
) -> Result<BootstrapDraws> {
    let ids: Vec<u64> = (0..replications as u64).collect();
    m_of_n_on_batches(model, theta_hat, plan, opt, stream, &ids)
}

/// The m-of-n bootstrap on the batches stored under the given sub-stream
/// indices of `stream`; replaying a chain's batch ids reproduces its batches.
pub fn m_of_n_on_batches<M: ObjectiveModel + ?Sized>(
    model: &M,
    theta_hat: &DVector<f64>,
    plan: &ResamplePlan,
    opt: OptimizerConfig,
    stream: &RngStream,
    ids: &[u64],
) -> Result<BootstrapDraws> {
    let (m, n) = plan.sizes();
    let cond = Conditioning::new(ConditioningKind::InverseHessian);
    let results: Vec<_> = ids
        .par_iter()
        .map(|&id| {
            let batch = plan.draw_batch(stream, id);
            match minimize(model, &batch, theta_hat, opt.gamma, opt.max_iter, opt.tol, cond) {
                Ok(r) if r.converged => Ok((id, Some((r.theta, false)))),
                Ok(_) => Ok((id, None)),
                Err(e) if e.is_numerical() => Ok((id, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    collect(BootstrapMethod::MofN, theta_hat, m, n, results)
}

/// k full Newton steps from θ̂ₙ on each resampled objective.
pub fn dmk_draws<M: ObjectiveModel + ?Sized>(
    model: &M,
    theta_hat: &DVector<f64>,
    k: usize,
    replications: usize,
    plan: &ResamplePlan,
    stream: &RngStream,
) -> Result<BootstrapDraws> {
    if k == 0 {
        return Err(Error::Config("DMK needs at least one Newton step".into()));
    }
    let (m, n) = plan.sizes();
    let results: Vec<_> = (0..replications as u64)
        .into_par_iter()
        .map(|id| {
            let batch = plan.draw_batch(stream, id);
            match dmk_on_batch(model, theta_hat, k, &batch) {
                Ok(r) => Ok((id, Some(r))),
                Err(e) if e.is_numerical() => Ok((id, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    collect(BootstrapMethod::Dmk, theta_hat, m, n, results)
}

/// One DMK draw; returns the draw and whether a Hessian was repaired.
pub fn dmk_on_batch<M: ObjectiveModel + ?Sized>(model: &M, theta_hat: &DVector<f64>, k: usize, batch: &BatchSelector) -> Result<(DVector<f64>, bool)> {
    let cond = Conditioning::new(ConditioningKind::InverseHessian);
    let mut theta = theta_hat.clone();
    let mut repaired = false;
    for _ in 0..k {
        let e = model.evaluate(&theta, batch)?;
        let dir = cond.direction_flagged(&e.hessian, &e.gradient)?;
        repaired |= dir.repaired;
        theta -= dir.step;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::evaluation(&theta, None, "DMK step produced a non-finite draw"));
    }
    Ok((theta, repaired))
}

/// `n` iid Rademacher signs.
pub fn rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Score bootstrap with the Hessian held at the full-sample estimate.
pub struct ScoreBootstrap {
    theta_hat: DVector<f64>,
    scores: DMatrix<f64>,
    hessian: DMatrix<f64>,
}

impl ScoreBootstrap {
    /// Requires per-observation scores (M-estimators only).
    pub fn new<M: ObjectiveModel + ?Sized>(model: &M, theta_hat: &DVector<f64>) -> Result<Self> {
        if !model.capabilities().per_observation_score {
            return Err(Error::Capability("per-observation scores (score bootstrap needs an M-estimator)"));
        }
        let scores = model.scores(theta_hat)?;
        let hessian = model.evaluate(theta_hat, &model.full_batch())?.hessian;
        Ok(Self {
            theta_hat: theta_hat.clone(),
            scores,
            hessian,
        })
    }

    /// `θ̂ + H⁻¹ (1/n) Σ ω_i G_i(θ̂)`.
    pub fn draw(&self, weights: &[f64]) -> Result<DVector<f64>> {
        let n = self.scores.nrows();
        let mut s = DVector::zeros(self.scores.ncols());
        for (i, w) in weights.iter().enumerate() {
            s.axpy(*w, &self.scores.row(i).transpose(), 1.0);
        }
        s /= n as f64;
        let step = crate::linalg::solve_symmetric(&self.hessian, &s).ok_or_else(|| Error::Conditioning {
            spectrum: crate::linalg::sym_eigenvalues(&self.hessian),
        })?;
        Ok(&self.theta_hat + step)
    }
}

pub fn ks_score_bootstrap<M: ObjectiveModel + ?Sized>(model: &M, theta_hat: &DVector<f64>, replications: usize, stream: &RngStream) -> Result<BootstrapDraws> {
    let ks = ScoreBootstrap::new(model, theta_hat)?;
    let n = model.n_obs();
    let results: Vec<_> = (0..replications as u64)
        .into_par_iter()
        .map(|id| {
            let w = rademacher(n, &mut stream.substream(id));
            ks.draw(&w).map(|t| (id, Some((t, false))))
        })
        .collect::<Result<_>>()?;
    collect(BootstrapMethod::Ks, theta_hat, n, n, results)
}

/// Residual bootstrap for MA(1): resample filtered residuals, rebuild the
/// series `y*_t = μ̂ + e*_t + ψ̂ e*_{t−1}` and refit by Newton from θ̂.
pub fn state_space_ma1_bootstrap(model: &Ma1, theta_hat: &DVector<f64>, replications: usize, stream: &RngStream, opt: OptimizerConfig) -> Result<BootstrapDraws> {
    let resid = model.residuals(theta_hat)?;
    let n = resid.len();
    let (mu, psi) = (theta_hat[0], theta_hat[1]);
    let cond = Conditioning::new(ConditioningKind::InverseHessian);
    let results: Vec<_> = (0..replications as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = stream.substream(id);
            let e: Vec<f64> = (0..=n).map(|_| resid[rng.random_range(0..n)]).collect();
            let y: Vec<f64> = (1..=n).map(|t| mu + e[t] + psi * e[t - 1]).collect();
            let refit = Ma1::new(&y)?;
            match minimize(&refit, &refit.full_batch(), theta_hat, opt.gamma, opt.max_iter, opt.tol, cond) {
                Ok(r) if r.converged => Ok((id, Some((r.theta, false)))),
                Ok(_) => Ok((id, None)),
                Err(e) if e.is_numerical() => Ok((id, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    collect(BootstrapMethod::StateSpaceMa1, theta_hat, n, n, results)
}
