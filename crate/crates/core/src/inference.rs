//! Point estimates, variances, intervals and diagnostics from chain draws.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::chains::{check_gamma, DrawHistory};
use crate::conditioning::Conditioning;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::ObjectiveModel;

/// Variance of the stationary AR(1) draw process relative to the innovation:
/// `φ(γ) = γ² / (1 − (1 − γ)²)`.
pub fn phi(gamma: f64) -> f64 {
    gamma * gamma / (1.0 - (1.0 - gamma).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ar1Diag {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub target: f64,
    /// `|coef − target| ≤ 3·se` per coordinate.
    pub pass: Vec<bool>,
    /// Coordinates with no variation in the draws.
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: String,
    pub theta_bar: Vec<f64>,
    /// Estimate of the √n-asymptotic variance.
    pub variance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    /// Two-sided test level; intervals cover `1 − alpha`.
    pub alpha: f64,
    pub wald: Option<WaldTest>,
    pub ar1: Option<Ar1Diag>,
    /// Coordinates whose draws have zero variance.
    pub degenerate: Vec<bool>,
    pub m: usize,
    pub n: usize,
    pub gamma: Option<f64>,
    pub draws: usize,
}

impl InferenceReport {
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_bar)
    }

    pub fn variance_matrix(&self) -> DMatrix<f64> {
        let d = self.theta_bar.len();
        DMatrix::from_fn(d, d, |i, j| self.variance[i][j])
    }

    /// Whether the interval for coordinate `j` excludes `value`.
    pub fn rejects(&self, j: usize, value: f64) -> bool {
        let (lo, hi) = self.ci[j];
        value < lo || value > hi
    }

    /// Adds a Wald test of `θ = θ†` using this report's variance and `n`.
    pub fn with_wald(mut self, null: &DVector<f64>) -> Result<Self> {
        self.wald = Some(wald(&self.theta(), null, &self.variance_matrix(), self.n)?);
        Ok(self)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("test level must lie in (0, 1), got {alpha}")))
    }
}

fn matrix_rows(v: &DMatrix<f64>) -> Vec<Vec<f64>> {
    v.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Summary of a free-lunch chain: mean of the retained draws, `V = (m/φ(γ))·cov`
/// (denominator B), `se = √(V_jj/n)`, and percentile intervals of
/// `θ̄ + √(m/(nφ(γ)))(θ_b − θ̄)`. Includes the AR(1) diagnostic when B ≥ 30.
pub fn summarize(history: &DrawHistory, alpha: f64) -> Result<InferenceReport> {
    let echo = &history.echo;
    let mut report = summarize_draws(&history.draws, echo.m, echo.n, echo.gamma, alpha)?;
    if history.draws.nrows() >= 30 {
        report.ar1 = Some(ar1_diagnostic(&history.draws, echo.gamma)?);
    }
    Ok(report)
}

pub fn summarize_draws(draws: &DMatrix<f64>, m: usize, n: usize, gamma: f64, alpha: f64) -> Result<InferenceReport> {
    check_gamma(gamma)?;
    check_alpha(alpha)?;
    if draws.nrows() < 2 {
        return Err(Error::Config(format!("need at least 2 draws, got {}", draws.nrows())));
    }
    if m == 0 || n == 0 {
        return Err(Error::Config("m and n must be positive".into()));
    }
    let mean = linalg::column_means(draws);
    let scale = m as f64 / phi(gamma);
    let v = linalg::covariance(draws, 0) * scale;
    let spread = (m as f64 / (n as f64 * phi(gamma))).sqrt();
    Ok(build_report("rnr", draws, &mean, &mean, &v, spread, m, n, Some(gamma), alpha))
}

/// Report for bootstrap-type draws: the estimate is `estimate`, intervals are
/// percentiles of `estimate + √(m/n)(θ_b − center)`, and `V = m·cov` so that
/// `se = √(m/n)·sd`. Bootstrap conventions use the B − 1 denominator.
///
/// The usual choice is `center = estimate`; recentering at the draw mean
/// corrects the location of simulation-based bootstraps.
pub fn summarize_bootstrap(method: &str, draws: &DMatrix<f64>, estimate: &DVector<f64>, center: &DVector<f64>, m: usize, n: usize, alpha: f64) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    if draws.nrows() < 2 {
        return Err(Error::Config(format!("need at least 2 draws, got {}", draws.nrows())));
    }
    if m == 0 || n == 0 {
        return Err(Error::Config("m and n must be positive".into()));
    }
    let v = linalg::covariance(draws, 1) * m as f64;
    let spread = (m as f64 / n as f64).sqrt();
    Ok(build_report(method, draws, estimate, center, &v, spread, m, n, None, alpha))
}

/// Two-chain summary for simulation-based estimation: the estimate is the
/// mean of chain 1, `V = (m/φ(γ))·cov(chain 2)` (denominator B), and the
/// intervals are percentiles of `θ̄ + √(m/(nφ(γ)))·θ²_b`.
pub fn summarize_two_chain(chain1: &DMatrix<f64>, chain2: &DMatrix<f64>, m: usize, n: usize, gamma: f64, alpha: f64) -> Result<InferenceReport> {
    check_gamma(gamma)?;
    check_alpha(alpha)?;
    if chain1.nrows() < 2 || chain1.shape() != chain2.shape() {
        return Err(Error::Config("two-chain summary needs equally sized chains with at least 2 draws".into()));
    }
    if m == 0 || n == 0 {
        return Err(Error::Config("m and n must be positive".into()));
    }
    let estimate = linalg::column_means(chain1);
    let v = linalg::covariance(chain2, 0) * (m as f64 / phi(gamma));
    let spread = (m as f64 / (n as f64 * phi(gamma))).sqrt();
    let origin = DVector::zeros(chain2.ncols());
    Ok(build_report("smd_rnr", chain2, &estimate, &origin, &v, spread, m, n, Some(gamma), alpha))
}

/// `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * p - 1.0)
}

/// Report for a point estimate with asymptotic variance `V`: intervals
/// `θ̂ ± z_{1−α/2}·se` with `se = √(V_jj/n)`.
pub fn normal_report(method: &str, estimate: &DVector<f64>, v: &DMatrix<f64>, n: usize, alpha: f64) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let d = estimate.len();
    if v.shape() != (d, d) || n == 0 {
        return Err(Error::Config("variance shape or sample size does not match the estimate".into()));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let se: Vec<f64> = (0..d).map(|j| (v[(j, j)].max(0.0) / n as f64).sqrt()).collect();
    Ok(InferenceReport {
        method: method.into(),
        theta_bar: estimate.iter().copied().collect(),
        variance: matrix_rows(v),
        ci: (0..d).map(|j| (estimate[j] - z * se[j], estimate[j] + z * se[j])).collect(),
        se,
        alpha,
        wald: None,
        ar1: None,
        degenerate: vec![false; d],
        m: n,
        n,
        gamma: None,
        draws: 0,
    })
}

/// Summary of resampled gradient-descent draws. With `A = I − γH` the draw
/// covariance `S` solves `S = ASA′ + γ²H Σ_m H`, so the batch-estimator
/// variance is recovered as `Σ_m = H⁻¹(S − ASA′)H⁻¹/γ²` and `V = mΣ_m`.
/// Intervals are normal, `θ̄ ± z·se`.
pub fn summarize_gradient_draws(draws: &DMatrix<f64>, h: &DMatrix<f64>, m: usize, n: usize, gamma: f64, alpha: f64) -> Result<InferenceReport> {
    check_gamma(gamma)?;
    let d = draws.ncols();
    if draws.nrows() < 2 || h.shape() != (d, d) {
        return Err(Error::Config("need at least 2 draws and a matching Hessian".into()));
    }
    let s = linalg::covariance(draws, 0);
    let a = DMatrix::identity(d, d) - h * gamma;
    let inner = &s - &a * &s * a.transpose();
    let hinv = linalg::spd_inverse(h)?;
    let v = &hinv * inner * &hinv * (m as f64 / (gamma * gamma));
    let v = (&v + v.transpose()) * 0.5;
    let mut report = normal_report("rgd", &linalg::column_means(draws), &v, n, alpha)?;
    report.m = m;
    report.gamma = Some(gamma);
    report.draws = draws.nrows();
    report.degenerate = (0..d).map(|j| draws.column(j).iter().all(|x| *x == draws[(0, j)])).collect();
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    method: &str,
    draws: &DMatrix<f64>,
    estimate: &DVector<f64>,
    center: &DVector<f64>,
    v: &DMatrix<f64>,
    spread: f64,
    m: usize,
    n: usize,
    gamma: Option<f64>,
    alpha: f64,
) -> InferenceReport {
    let d = draws.ncols();
    let mut se = Vec::with_capacity(d);
    let mut ci = Vec::with_capacity(d);
    let mut degenerate = Vec::with_capacity(d);
    for j in 0..d {
        se.push((v[(j, j)].max(0.0) / n as f64).sqrt());
        let col = draws.column(j);
        let flat = col.iter().all(|x| *x == col[0]);
        degenerate.push(flat);
        let mut vals: Vec<f64> = col.iter().map(|x| estimate[j] + spread * (x - center[j])).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        ci.push((linalg::quantile_sorted(&vals, alpha / 2.0), linalg::quantile_sorted(&vals, 1.0 - alpha / 2.0)));
    }
    if degenerate.iter().any(|x| *x) {
        log::warn!("{method}: draws have no variation in some coordinates");
    }
    InferenceReport {
        method: method.into(),
        theta_bar: estimate.iter().copied().collect(),
        variance: matrix_rows(v),
        se,
        ci,
        alpha,
        wald: None,
        ar1: None,
        degenerate,
        m,
        n,
        gamma,
        draws: draws.nrows(),
    }
}

/// `n (θ̄ − θ†)′ V⁻¹ (θ̄ − θ†)` with its χ²_d upper-tail p-value.
pub fn wald(theta_bar: &DVector<f64>, null: &DVector<f64>, v: &DMatrix<f64>, n: usize) -> Result<WaldTest> {
    let d = theta_bar.len();
    if null.len() != d || v.shape() != (d, d) {
        return Err(Error::Config("Wald test dimensions do not match".into()));
    }
    let spectrum = linalg::sym_eigenvalues(v);
    let top = spectrum.last().copied().unwrap_or(0.0);
    if !(spectrum[0] > 1e-14 * top.abs()) || top <= 0.0 {
        return Err(Error::SingularVariance { spectrum });
    }
    let diff = theta_bar - null;
    let sol = linalg::solve_symmetric(v, &diff).ok_or(Error::SingularVariance { spectrum })?;
    let statistic = n as f64 * diff.dot(&sol);
    Ok(WaldTest {
        statistic,
        dof: d,
        p_value: chi2_upper_tail(statistic, d),
    })
}

/// `P(χ²_k > x)`.
pub fn chi2_upper_tail(x: f64, k: usize) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(k as f64 / 2.0, x / 2.0)
    }
}

/// Least-squares AR(1) fit with intercept for each coordinate of the draws.
pub fn ar1_diagnostic(draws: &DMatrix<f64>, gamma: f64) -> Result<Ar1Diag> {
    let b = draws.nrows();
    if b < 30 {
        return Err(Error::Config(format!("AR(1) diagnostic needs at least 30 draws, got {b}")));
    }
    let target = 1.0 - gamma;
    let mut out = Ar1Diag {
        coefficients: Vec::new(),
        standard_errors: Vec::new(),
        target,
        pass: Vec::new(),
        degenerate: Vec::new(),
    };
    for col in draws.column_iter() {
        let (coef, se) = ar1_fit(col.as_slice());
        let degenerate = !coef.is_finite();
        out.pass.push(!degenerate && (coef - target).abs() <= 3.0 * se);
        out.coefficients.push(coef);
        out.standard_errors.push(se);
        out.degenerate.push(degenerate);
    }
    Ok(out)
}

/// `(coefficient, standard error)`; NaN for a constant series.
fn ar1_fit(x: &[f64]) -> (f64, f64) {
    let t = x.len() - 1;
    let lag = &x[..t];
    let cur = &x[1..];
    let ml = lag.iter().sum::<f64>() / t as f64;
    let mc = cur.iter().sum::<f64>() / t as f64;
    let sxx: f64 = lag.iter().map(|v| (v - ml).powi(2)).sum();
    if sxx <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let sxy: f64 = lag.iter().zip(cur).map(|(a, c)| (a - ml) * (c - mc)).sum();
    let coef = sxy / sxx;
    let ssr: f64 = lag.iter().zip(cur).map(|(a, c)| (c - mc - coef * (a - ml)).powi(2)).sum();
    let s2 = ssr / (t as f64 - 2.0);
    (coef, (s2 / sxx).sqrt())
}

/// Which Hessian linearizes the update around θ̂ when building the coupling sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingLinearization {
    /// Batch Hessian at θ̂: `θ* ← θ̂ + (I − γP̄H_b(θ̂))(θ* − θ̂) − γP̄G_b(θ̂)` with
    /// `P̄` built from `H_b(θ̂)`. Exact for quadratic objectives.
    #[default]
    BatchHessian,
    /// Full-sample Hessian at θ̂ in both `Ψ` and `P̄`.
    FullSampleHessian,
}

#[derive(Clone, Debug)]
pub struct CouplingReport {
    /// Linearized sequence, one row per chain row (burn-in rows first).
    pub theta_star: DMatrix<f64>,
    /// `‖θ_b − θ*_b‖` per row.
    pub distances: Vec<f64>,
    pub mean_distance: f64,
    pub max_distance: f64,
    /// Mean of `‖θ_b − θ̂‖` over retained rows.
    pub mean_deviation: f64,
}

/// Replays the chain's batches through the linearized recursion started at θ₀.
/// Summary statistics cover the retained (post burn-in) rows.
pub fn coupling_sequence<M: ObjectiveModel + ?Sized>(
    model: &M,
    theta_hat: &DVector<f64>,
    history: &DrawHistory,
    linearization: CouplingLinearization,
) -> Result<CouplingReport> {
    let ids = history.all_batch_ids();
    let draws = history.all_draws();
    if ids.len() != draws.nrows() {
        return Err(Error::Config("draw history lacks batch replay metadata".into()));
    }
    let d = theta_hat.len();
    let gamma = history.echo.gamma;
    let cond: Conditioning = history.echo.conditioning;
    let stream = history.echo.stream();
    let eye = DMatrix::<f64>::identity(d, d);
    let full_parts = match linearization {
        CouplingLinearization::FullSampleHessian => {
            let h = model.evaluate(theta_hat, &model.full_batch())?.hessian;
            let p = cond.matrix(&h)?;
            Some((&eye - &p * &h * gamma, p))
        }
        CouplingLinearization::BatchHessian => None,
    };
    let mut star = history.theta0.clone() - theta_hat;
    let mut rows = Vec::with_capacity(ids.len() * d);
    let mut distances = Vec::with_capacity(ids.len());
    for (r, id) in ids.iter().enumerate() {
        let batch = history.plan.draw_batch(&stream, *id);
        let e = model.evaluate(theta_hat, &batch)?;
        star = match &full_parts {
            Some((psi, p)) => psi * &star - p * &e.gradient * gamma,
            None => {
                let p = cond.matrix(&e.hessian)?;
                (&eye - &p * &e.hessian * gamma) * &star - p * &e.gradient * gamma
            }
        };
        let level = theta_hat + &star;
        distances.push((draws.row(r).transpose() - &level).norm());
        rows.extend(level.iter());
    }
    let burn = history.burn_draws.nrows();
    let post = &distances[burn..];
    let mean_distance = post.iter().sum::<f64>() / post.len() as f64;
    let max_distance = post.iter().fold(0.0f64, |m, v| m.max(*v));
    let mean_deviation = history.draws.row_iter().map(|r| (r.transpose() - theta_hat).norm()).sum::<f64>() / history.draws.nrows() as f64;
    Ok(CouplingReport {
        theta_star: DMatrix::from_row_slice(ids.len(), d, &rows),
        distances,
        mean_distance,
        max_distance,
        mean_deviation,
    })
}
