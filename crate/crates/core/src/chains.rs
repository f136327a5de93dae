//! Resampled chains `θ_{b+1} = θ_b − γ P_b G_b(θ_b)` and the classical
//! full-sample optimizers they are compared against.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conditioning::{BfgsState, Conditioning, ConditioningKind};
use crate::error::{Error, Result};
use crate::inference::{self, InferenceReport};
use crate::linalg;
use crate::models::{fd_hessian, ObjectiveModel};
use crate::resampling::{ResamplePlan, RngStream, Scheme};

/// Iterations inspected by the divergence check.
pub const DIVERGENCE_WINDOW: usize = 100;
/// More rejections than this inside the window abort the chain.
pub const DIVERGENCE_LIMIT: usize = 50;

/// Burn-in that shrinks the initialization error to about 1%:
/// `1 + round(ln 0.01 / ln(1 − γ))`, and 1 at γ = 1.
pub fn default_burn(gamma: f64) -> usize {
    if gamma >= 1.0 {
        return 1;
    }
    1 + (0.01f64.ln() / (1.0 - gamma).ln()).round() as usize
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("learning rate must lie in (0, 1], got {gamma}")))
    }
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub gamma: f64,
    /// Retained draws `B`.
    pub draws: usize,
    /// `None` uses [`default_burn`].
    pub burn: Option<usize>,
    pub theta0: DVector<f64>,
    pub conditioning: Conditioning,
    pub plan: ResamplePlan,
    /// A proposal whose full-sample objective exceeds this multiple of the
    /// current one is discarded; `f64::INFINITY` disables the check.
    pub rejection_factor: f64,
    /// Refresh the batch Hessian every `k` iterations.
    pub hessian_every_k: usize,
    pub stream: RngStream,
}

impl ChainConfig {
    pub fn new(gamma: f64, draws: usize, theta0: DVector<f64>, plan: ResamplePlan, stream: RngStream) -> Self {
        Self {
            gamma,
            draws,
            burn: None,
            theta0,
            conditioning: Conditioning::default(),
            plan,
            rejection_factor: 6.0,
            hessian_every_k: 1,
            stream,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn with_burn(mut self, burn: usize) -> Self {
        self.burn = Some(burn);
        self
    }

    pub fn with_rejection_factor(mut self, factor: f64) -> Self {
        self.rejection_factor = factor;
        self
    }

    pub fn with_hessian_every_k(mut self, k: usize) -> Self {
        self.hessian_every_k = k;
        self
    }

    pub fn burn(&self) -> usize {
        self.burn.unwrap_or_else(|| default_burn(self.gamma))
    }

    pub fn validate(&self, dim: usize, n_obs: usize) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.draws == 0 {
            return Err(Error::Config("number of retained draws must be at least 1".into()));
        }
        if self.theta0.len() != dim {
            return Err(Error::Config(format!("starting value has length {}, model has {dim} parameters", self.theta0.len())));
        }
        if self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("starting value must be finite".into()));
        }
        if self.plan.n() != n_obs {
            return Err(Error::Config(format!("resampling plan is for {} rows, model has {n_obs}", self.plan.n())));
        }
        if !(self.rejection_factor > 0.0) {
            return Err(Error::Config(format!("rejection factor must be positive, got {}", self.rejection_factor)));
        }
        if self.hessian_every_k == 0 {
            return Err(Error::Config("hessian_every_k must be at least 1".into()));
        }
        Ok(())
    }

    fn echo(&self) -> ChainEcho {
        let (m, n) = self.plan.sizes();
        ChainEcho {
            gamma: self.gamma,
            m,
            n,
            burn: self.burn(),
            draws: self.draws,
            seed: self.stream.seed,
            stream_id: self.stream.stream_id,
            conditioning: self.conditioning,
            rejection_factor: self.rejection_factor.is_finite().then_some(self.rejection_factor),
            hessian_every_k: self.hessian_every_k,
            scheme: self.plan.scheme().clone(),
        }
    }
}

/// Configuration stored with the draws; `m` and `n` are in resampling units
/// (rows, or clusters for the cluster scheme).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainEcho {
    pub gamma: f64,
    pub m: usize,
    pub n: usize,
    pub burn: usize,
    pub draws: usize,
    pub seed: u64,
    pub stream_id: u64,
    pub conditioning: Conditioning,
    /// `None` when the rejection check is disabled.
    pub rejection_factor: Option<f64>,
    pub hessian_every_k: usize,
    pub scheme: Scheme,
}

impl ChainEcho {
    pub fn stream(&self) -> RngStream {
        RngStream::new(self.seed, self.stream_id)
    }
}

#[derive(Clone, Debug)]
pub struct DrawHistory {
    pub theta0: DVector<f64>,
    pub burn_draws: DMatrix<f64>,
    /// Retained draws, one row per iteration after burn-in.
    pub draws: DMatrix<f64>,
    /// Sub-stream index of the batch that produced each burn-in row.
    pub burn_batch_ids: Vec<u64>,
    /// Sub-stream index of the batch that produced each retained row.
    pub batch_ids: Vec<u64>,
    pub rejections: usize,
    /// Iterations where the Hessian needed the ridge repair.
    pub repairs: usize,
    pub echo: ChainEcho,
    pub plan: ResamplePlan,
}

impl DrawHistory {
    /// Burn-in rows followed by retained rows.
    pub fn all_draws(&self) -> DMatrix<f64> {
        let (nb, nd) = (self.burn_draws.nrows(), self.draws.nrows());
        let d = self.draws.ncols();
        DMatrix::from_fn(nb + nd, d, |i, j| if i < nb { self.burn_draws[(i, j)] } else { self.draws[(i - nb, j)] })
    }

    pub fn all_batch_ids(&self) -> Vec<u64> {
        self.burn_batch_ids.iter().chain(&self.batch_ids).copied().collect()
    }
}

/// Runs `burn + B` iterations of the resampled chain.
pub fn run_resampled_chain<M: ObjectiveModel + ?Sized>(model: &M, cfg: &ChainConfig) -> Result<DrawHistory> {
    cfg.validate(model.dim(), model.n_obs())?;
    let d = model.dim();
    let burn = cfg.burn();
    let total = burn + cfg.draws;
    let full = model.full_batch();
    let check_q = cfg.rejection_factor.is_finite();
    let mut theta = cfg.theta0.clone();
    let mut q_full = if check_q {
        model.value(&theta, &full).map_err(|e| e.at_iteration(0))?
    } else {
        f64::NAN
    };
    let mut bfgs = if cfg.conditioning.kind == ConditioningKind::BfgsApprox {
        Some(BfgsState::new(fd_hessian(model, &theta, &full)?))
    } else {
        None
    };
    let mut cached_h: Option<DMatrix<f64>> = None;
    let mut window: VecDeque<bool> = VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let mut window_rejections = 0;
    let mut rows = Vec::with_capacity(total * d);
    let mut ids = Vec::with_capacity(total);
    let mut rejections = 0;
    let mut repairs = 0;

    for b in 0..total {
        let batch = cfg.plan.draw_batch(&cfg.stream, b as u64);
        let eval = model.evaluate(&theta, &batch).map_err(|e| e.at_iteration(b))?;
        let h = if let Some(state) = &bfgs {
            state.approximation().clone()
        } else if cfg.conditioning.needs_hessian() {
            if cached_h.is_none() || b % cfg.hessian_every_k == 0 {
                cached_h = Some(eval.hessian.clone());
            }
            cached_h.clone().unwrap()
        } else {
            eval.hessian.clone()
        };
        let dir = cfg.conditioning.direction_flagged(&h, &eval.gradient).map_err(|e| e.at_iteration(b))?;
        repairs += usize::from(dir.repaired);
        let proposal = &theta - &dir.step * cfg.gamma;

        let mut accepted = proposal.iter().all(|v| v.is_finite());
        let mut q_new = f64::NAN;
        if accepted && check_q {
            match model.value(&proposal, &full) {
                Ok(q) if q.is_finite() && q <= cfg.rejection_factor * q_full => q_new = q,
                Ok(_) => accepted = false,
                Err(e) if e.is_numerical() => accepted = false,
                Err(e) => return Err(e.at_iteration(b)),
            }
        }

        if accepted {
            if let Some(state) = bfgs.as_mut() {
                match model.gradient(&proposal, &batch) {
                    Ok(g_new) => {
                        state.set_anchor(theta.clone(), eval.gradient.clone());
                        state.update(&proposal, &g_new);
                    }
                    Err(e) if e.is_numerical() => accepted = false,
                    Err(e) => return Err(e.at_iteration(b)),
                }
            }
        }

        if accepted {
            theta = proposal;
            q_full = q_new;
        } else {
            rejections += 1;
            log::debug!("iteration {b}: proposal rejected");
            if let Some(state) = bfgs.as_mut() {
                state.reset(fd_hessian(model, &theta, &full).map_err(|e| e.at_iteration(b))?);
            }
        }
        window.push_back(!accepted);
        window_rejections += usize::from(!accepted);
        if window.len() > DIVERGENCE_WINDOW {
            window_rejections -= usize::from(window.pop_front().unwrap());
        }
        if window_rejections > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration: b,
                rejections: window_rejections,
                window: DIVERGENCE_WINDOW,
            });
        }
        rows.extend(theta.iter());
        ids.push(b as u64);
    }
    if rejections > 0 {
        log::info!("{rejections} of {total} proposals rejected");
    }

    let all = DMatrix::from_row_slice(total, d, &rows);
    Ok(DrawHistory {
        theta0: cfg.theta0.clone(),
        burn_draws: all.rows(0, burn).into_owned(),
        draws: all.rows(burn, cfg.draws).into_owned(),
        burn_batch_ids: ids[..burn].to_vec(),
        batch_ids: ids[burn..].to_vec(),
        rejections,
        repairs,
        echo: cfg.echo(),
        plan: cfg.plan.clone(),
    })
}

/// The chain with Newton-type conditioning, followed by the draw summary.
/// Identity conditioning is replaced by the inverse Hessian.
pub fn run_free_lunch<M: ObjectiveModel + ?Sized>(model: &M, cfg: &ChainConfig, alpha: f64) -> Result<(DrawHistory, InferenceReport)> {
    let mut cfg = cfg.clone();
    if cfg.conditioning.kind == ConditioningKind::Identity {
        log::warn!("free-lunch inference needs Newton-type conditioning; using the inverse Hessian");
        cfg.conditioning.kind = ConditioningKind::InverseHessian;
    }
    let history = run_resampled_chain(model, &cfg)?;
    let report = inference::summarize(&history, alpha)?;
    Ok((history, report))
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub value: f64,
}

/// Full-sample damped Newton: `θ_{k+1} = θ_k − γ H⁻¹G` until `‖G‖ ≤ tol(1 + ‖θ‖)`.
pub fn classical_newton<M: ObjectiveModel + ?Sized>(model: &M, theta0: &DVector<f64>, gamma: f64, max_iter: usize, tol: f64) -> Result<OptimResult> {
    minimize(model, &model.full_batch(), theta0, gamma, max_iter, tol, Conditioning::new(ConditioningKind::InverseHessian))
}

/// Full-sample gradient descent with the same stopping rule.
pub fn classical_gd<M: ObjectiveModel + ?Sized>(model: &M, theta0: &DVector<f64>, gamma: f64, max_iter: usize, tol: f64) -> Result<OptimResult> {
    minimize(model, &model.full_batch(), theta0, gamma, max_iter, tol, Conditioning::new(ConditioningKind::Identity))
}

/// Deterministic minimization of the objective on one batch. A step that
/// raises the objective is halved (at most 40 times) before being taken.
pub fn minimize<M: ObjectiveModel + ?Sized>(
    model: &M,
    batch: &crate::resampling::BatchSelector,
    theta0: &DVector<f64>,
    gamma: f64,
    max_iter: usize,
    tol: f64,
    conditioning: Conditioning,
) -> Result<OptimResult> {
    check_gamma(gamma)?;
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut theta = theta0.clone();
    let mut eval = model.evaluate(&theta, batch)?;
    for it in 0..max_iter {
        let gnorm = eval.gradient.norm();
        if gnorm <= tol * (1.0 + theta.norm()) {
            return Ok(OptimResult {
                theta,
                iterations: it,
                converged: true,
                gradient_norm: gnorm,
                value: eval.value,
            });
        }
        let dir = conditioning.direction(&eval.hessian, &eval.gradient)?;
        let mut step = gamma;
        let mut next = None;
        for _ in 0..40 {
            let cand = &theta - &dir * step;
            match model.evaluate(&cand, batch) {
                Ok(e) if e.value <= eval.value + 1e-12 * (1.0 + eval.value.abs()) => {
                    next = Some((cand, e));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_numerical() => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        match next {
            Some((t, e)) => {
                theta = t;
                eval = e;
            }
            None => break,
        }
    }
    let gnorm = eval.gradient.norm();
    Ok(OptimResult {
        converged: gnorm <= tol * (1.0 + theta.norm()),
        theta,
        iterations: max_iter,
        gradient_norm: gnorm,
        value: eval.value,
    })
}

#[derive(Clone, Debug)]
pub struct SgdResult {
    /// Polyak-Ruppert average of the iterates `θ_1, …, θ_K`.
    pub average: DVector<f64>,
    pub last: DVector<f64>,
    /// Iterates, one row per step.
    pub trace: DMatrix<f64>,
}

/// SGD with rate `γ_k = γ k^{−δ}` on batches from `plan`, averaged.
pub fn sgd_polyak<M: ObjectiveModel + ?Sized>(
    model: &M,
    theta0: &DVector<f64>,
    gamma: f64,
    delta: f64,
    plan: &ResamplePlan,
    iterations: usize,
    stream: &RngStream,
) -> Result<SgdResult> {
    if !(delta > 0.5 && delta <= 1.0) {
        return Err(Error::Config(format!("decay exponent must lie in (1/2, 1], got {delta}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) || iterations == 0 {
        return Err(Error::Config("SGD needs a positive rate and at least one iteration".into()));
    }
    let d = model.dim();
    let mut theta = theta0.clone();
    let mut sum = DVector::zeros(d);
    let mut rows = Vec::with_capacity(iterations * d);
    for k in 1..=iterations {
        let batch = plan.draw_batch(stream, (k - 1) as u64);
        let g = model.gradient(&theta, &batch).map_err(|e| e.at_iteration(k - 1))?;
        theta -= g * sgd_rate(gamma, delta, k);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: k - 1,
                rejections: 1,
                window: 1,
            });
        }
        sum += &theta;
        rows.extend(theta.iter());
    }
    Ok(SgdResult {
        average: sum / iterations as f64,
        last: theta,
        trace: DMatrix::from_row_slice(iterations, d, &rows),
    })
}

/// `γ_k = γ k^{−δ}`, `k ≥ 1`.
pub fn sgd_rate(gamma: f64, delta: f64, k: usize) -> f64 {
    gamma * (k as f64).powf(-delta)
}

#[derive(Clone, Debug, Serialize)]
pub struct Contraction {
    pub gamma: f64,
    /// Smallest eigenvalue of `P H` over the grid.
    pub lower: f64,
    /// Largest eigenvalue of `P H` over the grid.
    pub upper: f64,
    /// `1 − 2γ·lower + γ²·upper²`.
    pub a: f64,
    /// `√A`, the implied linear rate (NaN when `A < 0` cannot occur; clamped at 0).
    pub rate: f64,
    /// `A < 1`.
    pub contracting: bool,
}

pub fn contraction_from_bounds(gamma: f64, lower: f64, upper: f64) -> Contraction {
    let a = 1.0 - 2.0 * gamma * lower + gamma * gamma * upper * upper;
    Contraction {
        gamma,
        lower,
        upper,
        a,
        rate: a.max(0.0).sqrt(),
        contracting: a < 1.0,
    }
}

/// Contraction factor from eigenvalue bounds of the full-sample Hessian over a grid of θ.
///
/// For identity conditioning the bounds are those of `H`. Otherwise they are
/// the eigenvalues of `P(θ_i) H(θ_j)` over all grid pairs, which is what makes
/// the quadratic Newton case give bounds of exactly 1.
pub fn contraction_factor<M: ObjectiveModel + ?Sized>(model: &M, gamma: f64, conditioning: &Conditioning, grid: &[DVector<f64>]) -> Result<Contraction> {
    if grid.is_empty() {
        return Err(Error::Config("contraction factor needs at least one grid point".into()));
    }
    let full = model.full_batch();
    let hs: Vec<DMatrix<f64>> = grid.iter().map(|t| Ok(model.evaluate(t, &full)?.hessian)).collect::<Result<_>>()?;
    let (mut lower, mut upper) = (f64::INFINITY, f64::NEG_INFINITY);
    if conditioning.kind == ConditioningKind::Identity {
        for h in &hs {
            let ev = linalg::sym_eigenvalues(h);
            lower = lower.min(ev[0]);
            upper = upper.max(*ev.last().unwrap());
        }
    } else {
        for hi in &hs {
            let p = conditioning.matrix(hi)?;
            let p = (&p + p.transpose()) * 0.5;
            let eig = nalgebra::SymmetricEigen::new(p.clone());
            let p_min = eig.eigenvalues.min();
            if p_min <= 0.0 {
                for hj in &hs {
                    let hev = linalg::sym_eigenvalues(hj);
                    lower = lower.min(p_min * hev.last().unwrap());
                    upper = upper.max(eig.eigenvalues.max() * hev.last().unwrap());
                }
                continue;
            }
            let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
            for hj in &hs {
                let s = &root * hj * &root;
                let ev = linalg::sym_eigenvalues(&((&s + s.transpose()) * 0.5));
                lower = lower.min(ev[0]);
                upper = upper.max(*ev.last().unwrap());
            }
        }
    }
    Ok(contraction_from_bounds(gamma, lower, upper))
}
