//! Runs the configured methods on one sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, ResamplingKind};
use super::dgp::{Prepared, Sample};
use crate::baselines::{self, BootstrapDraws, OptimizerConfig};
use crate::chains::{self, ChainConfig, ChainEcho, DrawHistory};
use crate::conditioning::Conditioning;
use crate::error::{Error, Result};
use crate::inference::{self, InferenceReport};
use crate::linalg;
use crate::models::{Ma1, ObjectiveModel, Ols};
use crate::resampling::{BatchSelector, ResamplePlan, RngStream};
use crate::smd::{self, AuxStatistic, DynamicPanel, Lsdv, MeanSimulator, SampleMean, SimulatorModel, SmdConfig};

/// Stream labels below the per-method labels.
pub const DATA_LABEL: u64 = 1;
const POINT_LABEL: u64 = 2;

/// Chain output kept for the draws files.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Burn-in rows followed by retained rows.
    pub rows: DMatrix<f64>,
    pub batch_ids: Vec<u64>,
    pub burn: usize,
    pub echo: Option<ChainEcho>,
    pub rejections: usize,
}

/// One method's result on one sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodRun {
    pub label: String,
    pub method: Method,
    pub gamma: Option<f64>,
    pub m: usize,
    /// Retained draws or bootstrap replications; 0 for classical fits.
    pub b: usize,
    pub seed: u64,
    pub report: Option<InferenceReport>,
    pub error: Option<String>,
    /// Whether the failure was numerical rather than a configuration problem.
    pub numerical_failure: bool,
    #[serde(skip)]
    pub trace: Option<Trace>,
}

impl MethodRun {
    fn ok(&self) -> bool {
        self.report.is_some()
    }
}

/// All method results on one sample.
#[derive(Clone, Debug)]
pub struct SampleRuns {
    pub runs: Vec<MethodRun>,
    /// Classical estimate (θ̂ₙ or θ̂_SMD) when it could be computed.
    pub theta_hat: Option<DVector<f64>>,
    pub n: usize,
}

/// FNV-1a of a method label, used to give each method its own stream.
pub fn label_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Stream of replication `replication` of an experiment seeded with `seed`.
pub fn replication_stream(seed: u64, replication: u64) -> RngStream {
    RngStream::new(seed, replication)
}

pub fn method_label(method: Method, gamma: Option<f64>) -> String {
    match gamma {
        Some(g) => format!("{}_{g}", method.tag()),
        None => method.tag().to_string(),
    }
}

fn chain_m(cfg: &ExperimentConfig, n: usize) -> usize {
    cfg.chain.m.unwrap_or(n)
}

fn boot_m(cfg: &ExperimentConfig, n: usize) -> usize {
    cfg.bootstrap.m.or(cfg.chain.m).unwrap_or(n)
}

fn optimizer(cfg: &ExperimentConfig) -> OptimizerConfig {
    OptimizerConfig {
        gamma: 1.0,
        max_iter: cfg.bootstrap.max_iter,
        tol: cfg.bootstrap.tol,
    }
}

/// Resampling plan for an M-estimator with batch size `m`.
pub fn build_plan(cfg: &ExperimentConfig, prepared: &Prepared, m: usize) -> Result<ResamplePlan> {
    let n = prepared.sample.n();
    let kind = cfg.chain.resampling.unwrap_or(match (&prepared.sample, &prepared.clusters) {
        (Sample::Ma1(_), _) => ResamplingKind::BlockResampled,
        (_, Some(_)) => ResamplingKind::Cluster,
        _ => ResamplingKind::Iid,
    });
    match kind {
        ResamplingKind::Iid => ResamplePlan::iid(n, m),
        ResamplingKind::MovingBlock => ResamplePlan::moving_block(n, m),
        ResamplingKind::BlockResampled => ResamplePlan::block_resampled(n, m),
        ResamplingKind::Exponential => ResamplePlan::exponential(n),
        ResamplingKind::Cluster => {
            let ids = prepared
                .clusters
                .as_ref()
                .ok_or_else(|| Error::Config("cluster resampling needs cluster labels".into()))?;
            ResamplePlan::clusters(ids, cfg.chain.m)
        }
    }
}

/// `V` of the classical estimator: homoskedastic with a degrees-of-freedom
/// correction for least squares, the inverse information for probit, and
/// `σ̂²(J′J/n)⁻¹` for the MA(1) least-squares fit.
pub fn classical_variance(sample: &Sample, theta_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    match sample {
        Sample::Ols(m) => ols_variance(m, theta_hat),
        Sample::Probit(m) => {
            let h = m.evaluate(theta_hat, &m.full_batch())?.hessian;
            linalg::spd_inverse(&h)
        }
        Sample::Ma1(m) => ma1_variance(m, theta_hat),
        Sample::Panel(..) | Sample::Mean(_) => Err(Error::Capability("analytic variance of the simulated estimator")),
    }
}

fn ols_variance(m: &Ols, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let x = m.design();
    let resid = m.response() - &x * theta;
    let (n, d) = x.shape();
    if n <= d {
        return Err(Error::Model("no residual degrees of freedom".into()));
    }
    let s2 = resid.norm_squared() / (n - d) as f64;
    Ok(linalg::spd_inverse(&(x.transpose() * &x / n as f64))? * s2)
}

fn ma1_variance(m: &Ma1, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let f = m.filter(theta)?;
    let n = f.e.len() as f64;
    let s2 = f.e.iter().map(|e| e * e).sum::<f64>() / n;
    let mut jj = DMatrix::zeros(2, 2);
    for t in 0..f.e.len() {
        let g = nalgebra::Vector2::new(f.de_dmu[t], f.de_dpsi[t]);
        jj += DMatrix::from_column_slice(2, 2, (g * g.transpose()).as_slice());
    }
    Ok(linalg::spd_inverse(&(jj / n))? * s2)
}

fn failed(label: String, method: Method, gamma: Option<f64>, m: usize, b: usize, seed: u64, e: &Error) -> MethodRun {
    log::warn!("{label} failed: {e}");
    MethodRun {
        label,
        method,
        gamma,
        m,
        b,
        seed,
        report: None,
        error: Some(e.to_string()),
        numerical_failure: e.is_numerical(),
        trace: None,
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    stream: RngStream,
    seed: u64,
}

impl Ctx<'_> {
    fn method_stream(&self, label: &str) -> RngStream {
        self.stream.derive(label_id(label))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(&self, label: String, method: Method, gamma: Option<f64>, m: usize, b: usize, result: Result<(InferenceReport, Option<Trace>)>) -> MethodRun {
        match result {
            Ok((report, trace)) => MethodRun {
                label,
                method,
                gamma,
                m,
                b,
                seed: self.seed,
                report: Some(report),
                error: None,
                numerical_failure: false,
                trace,
            },
            Err(e) => failed(label, method, gamma, m, b, self.seed, &e),
        }
    }
}

fn history_trace(h: &DrawHistory) -> Trace {
    Trace {
        rows: h.all_draws(),
        batch_ids: h.all_batch_ids(),
        burn: h.burn_draws.nrows(),
        echo: Some(h.echo.clone()),
        rejections: h.rejections,
    }
}

/// Hands a shared intermediate result to a method, keeping whether a
/// failure was numerical.
fn reuse(r: &Result<DVector<f64>>, label: &str) -> Result<DVector<f64>> {
    match r {
        Ok(t) => Ok(t.clone()),
        Err(e) if e.is_numerical() => Err(Error::evaluation(&DVector::zeros(0), None, format!("{label}: {e}"))),
        Err(e) => Err(Error::Model(format!("{label}: {e}"))),
    }
}

fn start_value(cfg: &ExperimentConfig, d: usize) -> Result<DVector<f64>> {
    match &cfg.chain.theta0 {
        Some(t) if t.len() == d => Ok(DVector::from_column_slice(t)),
        Some(t) => Err(Error::Config(format!("chain.theta0 has length {}, model has {d} parameters", t.len()))),
        None => Ok(DVector::zeros(d)),
    }
}

/// Runs every configured method on `prepared`. `stream` is the replication
/// stream; each method derives its own child stream from its label, so the
/// results do not depend on which other methods are requested.
pub fn run_methods(cfg: &ExperimentConfig, prepared: &Prepared, stream: &RngStream) -> SampleRuns {
    let ctx = Ctx {
        cfg,
        stream: *stream,
        seed: cfg.seed,
    };
    match &prepared.sample {
        Sample::Ols(m) => run_m_estimator(&ctx, prepared, m),
        Sample::Probit(m) => run_m_estimator(&ctx, prepared, m),
        Sample::Ma1(m) => run_m_estimator(&ctx, prepared, m),
        Sample::Panel(model, data) => {
            let start = smd::lsdv(data, &BatchSelector::full(data.individuals()));
            run_simulated::<DynamicPanel, Lsdv>(&ctx, model, &Lsdv, data, start)
        }
        Sample::Mean(y) => {
            let start = SampleMean.compute(y, &BatchSelector::full(y.len()));
            run_simulated::<MeanSimulator, SampleMean>(&ctx, &MeanSimulator, &SampleMean, y, start)
        }
    }
}

fn run_m_estimator<M: ObjectiveModel>(ctx: &Ctx, prepared: &Prepared, model: &M) -> SampleRuns {
    let cfg = ctx.cfg;
    let n = model.n_obs();
    let d = model.dim();
    let mut runs = Vec::new();
    let theta0 = match start_value(cfg, d) {
        Ok(t) => t,
        Err(e) => {
            let runs = cfg.methods.iter().map(|&m| failed(m.tag().into(), m, None, n, 0, ctx.seed, &e)).collect();
            return SampleRuns { runs, theta_hat: None, n };
        }
    };
    let classical = chains::classical_newton(model, &theta0, 1.0, 200, 1e-10).and_then(|r| {
        if r.converged {
            Ok(r.theta)
        } else {
            Err(Error::evaluation(&r.theta, None, format!("classical optimizer stopped with gradient norm {:.3e}", r.gradient_norm)))
        }
    });
    let theta_hat = classical.as_ref().ok().cloned();
    let needs_hat = |label: &str| reuse(&classical, &format!("{label} needs the classical estimate"));

    for &method in &cfg.methods {
        match method {
            Method::Classical => {
                let result = needs_hat("classical").and_then(|t| {
                    let v = classical_variance(&prepared.sample, &t)?;
                    Ok((inference::normal_report("classical", &t, &v, n, cfg.alpha)?, None))
                });
                runs.push(ctx.finish("classical".into(), method, None, n, 0, result));
            }
            Method::Rnr | Method::Rgd | Method::Rqn => {
                for &gamma in &cfg.chain.gammas {
                    let label = method_label(method, Some(gamma));
                    let m = chain_m(cfg, n);
                    let result = build_plan(cfg, prepared, m).and_then(|plan| {
                        let conditioning = Conditioning {
                            kind: ExperimentConfig::conditioning_for(method),
                            pd_repair_c: cfg.chain.pd_repair_c,
                        };
                        let mut chain = ChainConfig::new(gamma, cfg.chain.draws, theta0.clone(), plan, ctx.method_stream(&label))
                            .with_conditioning(conditioning)
                            .with_rejection_factor(cfg.chain.rejection_factor)
                            .with_hessian_every_k(cfg.chain.hessian_every_k);
                        if let Some(b) = cfg.chain.burn {
                            chain = chain.with_burn(b);
                        }
                        let history = chains::run_resampled_chain(model, &chain)?;
                        let mut report = if method == Method::Rgd {
                            let center = linalg::column_means(&history.draws);
                            let h = model.evaluate(&center, &model.full_batch())?.hessian;
                            inference::summarize_gradient_draws(&history.draws, &h, history.echo.m, n, gamma, cfg.alpha)?
                        } else {
                            inference::summarize(&history, cfg.alpha)?
                        };
                        report.method = label.clone();
                        Ok((report, Some(history_trace(&history))))
                    });
                    runs.push(ctx.finish(label, method, Some(gamma), m, cfg.chain.draws, result));
                }
            }
            Method::Mofn | Method::Dmk | Method::Ks => {
                let label = match method {
                    Method::Dmk => format!("dmk_k{}", cfg.bootstrap.k),
                    _ => method.tag().to_string(),
                };
                let m = if method == Method::Ks { n } else { boot_m(cfg, n) };
                let reps = cfg.bootstrap.replications;
                let stream = ctx.method_stream(&label);
                let result = needs_hat(&label).and_then(|t| {
                    let draws = bootstrap_m_estimator(method, cfg, prepared, model, &t, m, &stream)?;
                    let mut report = draws.report(cfg.alpha)?;
                    report.method = label.clone();
                    Ok((report, None))
                });
                runs.push(ctx.finish(label, method, None, m, reps, result));
            }
            Method::Smd => unreachable!("rejected by config validation"),
        }
    }
    SampleRuns { runs, theta_hat, n }
}

fn bootstrap_m_estimator<M: ObjectiveModel>(
    method: Method,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    model: &M,
    theta_hat: &DVector<f64>,
    m: usize,
    stream: &RngStream,
) -> Result<BootstrapDraws> {
    let reps = cfg.bootstrap.replications;
    match method {
        Method::Ks => baselines::ks_score_bootstrap(model, theta_hat, reps, stream),
        Method::Dmk => {
            let plan = build_plan(cfg, prepared, m)?;
            baselines::dmk_draws(model, theta_hat, cfg.bootstrap.k, reps, &plan, stream)
        }
        _ => match &prepared.sample {
            // The residual bootstrap is the full-size bootstrap for the MA(1) model.
            Sample::Ma1(ma) if m == model.n_obs() => baselines::state_space_ma1_bootstrap(ma, theta_hat, reps, stream, optimizer(cfg)),
            _ => {
                let plan = build_plan(cfg, prepared, m)?;
                baselines::m_of_n_bootstrap(model, theta_hat, &plan, optimizer(cfg), reps, stream)
            }
        },
    }
}

fn run_simulated<S, A>(ctx: &Ctx, sim: &S, aux: &A, data: &S::Data, start: Result<DVector<f64>>) -> SampleRuns
where
    S: SimulatorModel,
    A: AuxStatistic<S::Data>,
{
    let cfg = ctx.cfg;
    let n = sim.units(data);
    let sims = cfg.smd.simulations;
    let start = match (&cfg.chain.theta0, start) {
        (Some(t), _) if t.len() == sim.dim() => Ok(DVector::from_column_slice(t)),
        (Some(t), _) => Err(Error::Config(format!("chain.theta0 has length {}, model has {} parameters", t.len(), sim.dim()))),
        (None, s) => s,
    };
    let wants_point = cfg.methods.iter().any(|m| matches!(m, Method::Classical | Method::Mofn));
    let classical = reuse(&start, "starting value").and_then(|s| {
        if !wants_point {
            return Err(Error::Config("no method needs the SMD point estimate".into()));
        }
        let point_stream = ctx.stream.derive(POINT_LABEL);
        let est = smd::smd_point_estimate(sim, aux, data, None, sims, &s, optimizer(cfg), &point_stream)?;
        if est.optim.converged {
            Ok(est.theta)
        } else {
            Err(Error::evaluation(&est.theta, None, "SMD point estimate did not converge"))
        }
    });
    let theta_hat = classical.as_ref().ok().cloned();
    let mut runs = Vec::new();
    for &method in &cfg.methods {
        match method {
            Method::Classical => {
                // Point estimate only; intervals come from the bootstrap or the chains.
                let result = reuse(&classical, "SMD estimate").and_then(|t| {
                    let d = t.len();
                    let v = DMatrix::from_element(d, d, f64::NAN);
                    let mut report = inference::normal_report("classical", &t, &v, n, cfg.alpha)?;
                    report.se = vec![f64::NAN; d];
                    report.ci = vec![(f64::NAN, f64::NAN); d];
                    Ok((report, None))
                });
                runs.push(ctx.finish("classical".into(), method, None, n, 0, result));
            }
            Method::Mofn => {
                let label = "smd_bootstrap".to_string();
                let m = boot_m(cfg, n);
                let reps = cfg.bootstrap.replications;
                let stream = ctx.method_stream(&label);
                let result = reuse(&classical, "SMD estimate").and_then(|t| {
                    let draws = smd::smd_bootstrap(sim, aux, data, None, sims, &t, m, reps, optimizer(cfg), &stream)?;
                    Ok((draws.report(cfg.alpha)?, None))
                });
                runs.push(ctx.finish(label, method, None, m, reps, result));
            }
            Method::Smd => {
                for &gamma in &cfg.chain.gammas {
                    let label = method_label(method, Some(gamma));
                    let m = chain_m(cfg, n);
                    let result = reuse(&start, "starting value").and_then(|s| {
                        let mut sc = SmdConfig::new(gamma, cfg.chain.draws, m, sims, s, ctx.method_stream(&label));
                        sc.pd_repair_c = cfg.chain.pd_repair_c;
                        if let Some(b) = cfg.chain.burn {
                            sc = sc.with_burn(b);
                        }
                        let pair = smd::run_smd_pair(sim, aux, data, &sc)?;
                        let mut report = pair.report(cfg.alpha)?;
                        report.method = label.clone();
                        let burn = pair.burn_chain1.nrows();
                        let d = pair.chain1.ncols();
                        let rows = DMatrix::from_fn(burn + pair.chain1.nrows(), d, |i, j| {
                            if i < burn {
                                pair.burn_chain1[(i, j)]
                            } else {
                                pair.chain1[(i - burn, j)]
                            }
                        });
                        let trace = Trace {
                            rows,
                            batch_ids: (0..(burn + pair.chain1.nrows()) as u64).collect(),
                            burn,
                            echo: None,
                            rejections: pair.rejections,
                        };
                        Ok((report, Some(trace)))
                    });
                    runs.push(ctx.finish(label, method, Some(gamma), m, cfg.chain.draws, result));
                }
            }
            _ => unreachable!("rejected by config validation"),
        }
    }
    SampleRuns { runs, theta_hat, n }
}

impl SampleRuns {
    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(MethodRun::ok)
    }

    pub fn any_ok(&self) -> bool {
        self.runs.iter().any(MethodRun::ok)
    }
}

/// Whether a report's intervals are usable for testing.
pub fn testable(report: &InferenceReport) -> bool {
    report.ci.iter().all(|(lo, hi)| lo.is_finite() && hi.is_finite())
}
