//! Simulated method of moments: the two-chain resampled Newton-Raphson
//! scheme, the classical SMD estimator and its bootstrap, plus two
//! simulators (a sample mean and a dynamic panel with fixed effects).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{collect, BootstrapDraws, BootstrapMethod, OptimizerConfig};
use crate::chains::{check_gamma, default_burn, minimize, OptimResult, DIVERGENCE_LIMIT, DIVERGENCE_WINDOW};
use crate::conditioning::{Conditioning, ConditioningKind};
use crate::error::{Error, Result};
use crate::inference::{summarize_two_chain, InferenceReport};
use crate::models::{Capabilities, Evaluation, ObjectiveModel};
use crate::numdiff;
use crate::resampling::{BatchSelector, ResamplePlan, RngStream};

/// Relative forward-difference step for simulated Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-4;

const SHOCK_LABEL: u64 = 0x5348_4f43;
const POINT_LABEL: u64 = 0x504f_494e;

/// A parametric simulator driven by standard normal shocks.
pub trait SimulatorModel: Send + Sync {
    type Data: Send + Sync;

    fn dim(&self) -> usize;

    /// Number of resampling units in `data`.
    fn units(&self, data: &Self::Data) -> usize;

    /// Shocks needed to simulate `units` units.
    fn shock_len(&self, units: usize) -> usize;

    fn simulate(&self, theta: &DVector<f64>, units: usize, shocks: &[f64]) -> Result<Self::Data>;

    fn admissible(&self, _theta: &DVector<f64>) -> bool {
        true
    }
}

/// Auxiliary statistic `ψ` computed on a batch of units.
pub trait AuxStatistic<D>: Send + Sync {
    fn len(&self) -> usize;

    fn compute(&self, data: &D, batch: &BatchSelector) -> Result<DVector<f64>>;
}

/// `simulations` independent shock vectors for `units` units.
pub fn draw_shocks<S: SimulatorModel + ?Sized, R: Rng + ?Sized>(sim: &S, units: usize, simulations: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let len = sim.shock_len(units);
    (0..simulations)
        .map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// `ψ_S(θ)`: the auxiliary statistic averaged over the simulated samples.
pub fn simulated_statistic<S, A>(sim: &S, aux: &A, theta: &DVector<f64>, units: usize, shocks: &[Vec<f64>]) -> Result<DVector<f64>>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    let full = BatchSelector::full(units);
    let one = |s: &Vec<f64>| -> Result<DVector<f64>> { aux.compute(&sim.simulate(theta, units, s)?, &full) };
    let parts: Vec<DVector<f64>> = if shocks.len() > 1 {
        shocks.par_iter().map(one).collect::<Result<_>>()?
    } else {
        shocks.iter().map(one).collect::<Result<_>>()?
    };
    let mut acc = DVector::zeros(aux.len());
    for p in &parts {
        acc += p;
    }
    let psi = acc / parts.len() as f64;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::evaluation(theta, None, "simulated statistic is not finite"));
    }
    Ok(psi)
}

/// `ψ_S(θ)` and its forward-difference Jacobian on common shocks.
pub fn simulated_jacobian<S, A>(sim: &S, aux: &A, theta: &DVector<f64>, units: usize, shocks: &[Vec<f64>], rel: f64) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    let psi = simulated_statistic(sim, aux, theta, units, shocks)?;
    let jac = numdiff::forward_jacobian(|t| simulated_statistic(sim, aux, t, units, shocks), theta, &psi, rel)?;
    Ok((psi, jac))
}

fn check_weight(weight: &DMatrix<f64>, q: usize) -> Result<()> {
    if weight.shape() != (q, q) {
        return Err(Error::Config(format!("weight matrix is {:?}, expected {q} x {q}", weight.shape())));
    }
    if (weight - weight.transpose()).amax() > 1e-10 * (1.0 + weight.amax()) {
        return Err(Error::Config("weight matrix is not symmetric".into()));
    }
    let ev = crate::linalg::sym_eigenvalues(weight);
    if ev[0] < -1e-12 * ev[q - 1].abs().max(1.0) {
        return Err(Error::Config("weight matrix is not positive semidefinite".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmdHessian {
    /// `2 J′WJ`.
    #[default]
    GaussNewton,
    /// Central differences of the batch gradient `−2 J(θ)′W(ψ_m − ψ_S(θ))`.
    FiniteDifference,
}

#[derive(Clone, Debug)]
pub struct SmdConfig {
    pub gamma: f64,
    pub draws: usize,
    pub burn: Option<usize>,
    /// Units per batch.
    pub m: usize,
    /// Simulated samples per iteration.
    pub simulations: usize,
    pub theta0: DVector<f64>,
    /// `None` means the identity.
    pub weight: Option<DMatrix<f64>>,
    pub jacobian_step: f64,
    pub hessian: SmdHessian,
    pub pd_repair_c: Option<f64>,
    pub stream: RngStream,
}

impl SmdConfig {
    pub fn new(gamma: f64, draws: usize, m: usize, simulations: usize, theta0: DVector<f64>, stream: RngStream) -> Self {
        Self {
            gamma,
            draws,
            burn: None,
            m,
            simulations,
            theta0,
            weight: None,
            jacobian_step: JACOBIAN_STEP,
            hessian: SmdHessian::GaussNewton,
            pd_repair_c: None,
            stream,
        }
    }

    pub fn with_weight(mut self, w: DMatrix<f64>) -> Self {
        self.weight = Some(w);
        self
    }

    pub fn with_burn(mut self, burn: usize) -> Self {
        self.burn = Some(burn);
        self
    }

    pub fn with_hessian(mut self, h: SmdHessian) -> Self {
        self.hessian = h;
        self
    }

    pub fn burn(&self) -> usize {
        self.burn.unwrap_or_else(|| default_burn(self.gamma))
    }

    fn weight_matrix(&self, q: usize) -> DMatrix<f64> {
        self.weight.clone().unwrap_or_else(|| DMatrix::identity(q, q))
    }

    fn validate(&self, dim: usize, q: usize, n: usize) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.draws < 2 {
            return Err(Error::Config(format!("need at least 2 draws, got {}", self.draws)));
        }
        if self.m == 0 || self.m > n {
            return Err(Error::Config(format!("batch size m = {} must lie in 1..={n}", self.m)));
        }
        if self.simulations == 0 {
            return Err(Error::Config("need at least one simulated sample per iteration".into()));
        }
        if self.theta0.len() != dim {
            return Err(Error::Config(format!("theta0 has length {}, expected {dim}", self.theta0.len())));
        }
        if q < dim {
            return Err(Error::Config(format!("{q} auxiliary statistics cannot identify {dim} parameters")));
        }
        if !(self.jacobian_step > 0.0 && self.jacobian_step.is_finite()) {
            return Err(Error::Config("jacobian step must be positive".into()));
        }
        if let Some(w) = &self.weight {
            check_weight(w, q)?;
        }
        Ok(())
    }

    fn conditioning(&self) -> Conditioning {
        Conditioning {
            kind: ConditioningKind::InverseHessian,
            pd_repair_c: self.pd_repair_c,
        }
    }

    /// Stream whose sub-stream `b` holds the shocks of iteration `b`.
    pub fn shock_stream(&self) -> RngStream {
        self.stream.derive(SHOCK_LABEL)
    }
}

/// Output of the two-chain scheme. Rows are iterates after each update.
#[derive(Clone, Debug)]
pub struct SmdChains {
    /// Chain 1 (simulated moments), after burn-in.
    pub chain1: DMatrix<f64>,
    /// Chain 2 (data-only moments, started at 0), after burn-in.
    pub chain2: DMatrix<f64>,
    pub burn_chain1: DMatrix<f64>,
    pub burn_chain2: DMatrix<f64>,
    /// Iteration index (batch and shock sub-stream) of each retained row.
    pub batch_ids: Vec<u64>,
    /// `ψ_n`, the statistic on the full data.
    pub psi_n: DVector<f64>,
    pub rejections: usize,
    pub repairs: usize,
    pub gamma: f64,
    pub m: usize,
    pub n: usize,
    pub simulations: usize,
}

impl SmdChains {
    /// Estimate from chain 1, variance and intervals from chain 2.
    pub fn report(&self, alpha: f64) -> Result<InferenceReport> {
        summarize_two_chain(&self.chain1, &self.chain2, self.m, self.n, self.gamma, alpha)
    }
}

struct Step {
    g: DVector<f64>,
    p: DMatrix<f64>,
    jac_w: DMatrix<f64>,
    repaired: bool,
}

fn batch_gradient<S, A>(sim: &S, aux: &A, theta: &DVector<f64>, psi_m: &DVector<f64>, units: usize, shocks: &[Vec<f64>], w: &DMatrix<f64>, rel: f64) -> Result<DVector<f64>>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    let (psi, jac) = simulated_jacobian(sim, aux, theta, units, shocks, rel)?;
    Ok(jac.transpose() * w * (psi_m - psi) * -2.0)
}

#[allow(clippy::too_many_arguments)]
fn smd_step<S, A>(sim: &S, aux: &A, theta: &DVector<f64>, psi_m: &DVector<f64>, units: usize, shocks: &[Vec<f64>], w: &DMatrix<f64>, cfg: &SmdConfig) -> Result<Step>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    let (psi, jac) = simulated_jacobian(sim, aux, theta, units, shocks, cfg.jacobian_step)?;
    let jac_w = jac.transpose() * w;
    let g = &jac_w * (psi_m - psi) * -2.0;
    let h = match cfg.hessian {
        SmdHessian::GaussNewton => &jac_w * &jac * 2.0,
        SmdHessian::FiniteDifference => numdiff::hessian_from_gradient(|t| batch_gradient(sim, aux, t, psi_m, units, shocks, w, cfg.jacobian_step), theta)?,
    };
    let ev = crate::linalg::sym_eigenvalues(&h);
    let top = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let repaired = ev[0] <= crate::conditioning::PD_TOL * top;
    let p = cfg.conditioning().matrix(&h)?;
    Ok(Step { g, p, jac_w, repaired })
}

/// Runs both chains on shared batches: chain 1 with simulated moments at
/// fresh shocks each iteration, chain 2 with `ψ_m − ψ_n` only. Proposals
/// that are non-finite, inadmissible, or whose simulation fails are
/// rejected and counted.
pub fn run_smd_pair<S, A>(sim: &S, aux: &A, data: &S::Data, cfg: &SmdConfig) -> Result<SmdChains>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    let d = sim.dim();
    let q = aux.len();
    let n = sim.units(data);
    cfg.validate(d, q, n)?;
    if !sim.admissible(&cfg.theta0) {
        return Err(Error::Config(format!("theta0 {:?} is not admissible", cfg.theta0.as_slice())));
    }
    let w = cfg.weight_matrix(q);
    let plan = ResamplePlan::iid(n, cfg.m)?;
    let shock_stream = cfg.shock_stream();
    let psi_n = aux.compute(data, &BatchSelector::full(n))?;
    let burn = cfg.burn();
    let total = burn + cfg.draws;

    let mut theta1 = cfg.theta0.clone();
    let mut theta2 = DVector::zeros(d);
    let mut rows1 = Vec::with_capacity(total * d);
    let mut rows2 = Vec::with_capacity(total * d);
    let mut window: VecDeque<bool> = VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let mut window_rejections = 0;
    let mut rejections = 0;
    let mut repairs = 0;

    for b in 0..total {
        let batch = plan.draw_batch(&cfg.stream, b as u64);
        let psi_m = aux.compute(data, &batch).map_err(|e| e.at_iteration(b))?;
        let shocks = draw_shocks(sim, cfg.m, cfg.simulations, &mut shock_stream.substream(b as u64));
        let accepted = match smd_step(sim, aux, &theta1, &psi_m, cfg.m, &shocks, &w, cfg) {
            Ok(step) => {
                repairs += usize::from(step.repaired);
                let g2 = &step.jac_w * (&psi_m - &psi_n) * -2.0;
                theta2 = &theta2 * (1.0 - cfg.gamma) - &step.p * g2 * cfg.gamma;
                let proposal = &theta1 - &step.p * &step.g * cfg.gamma;
                if proposal.iter().all(|v| v.is_finite()) && sim.admissible(&proposal) {
                    theta1 = proposal;
                    true
                } else {
                    false
                }
            }
            Err(e) if e.is_numerical() => false,
            Err(e) => return Err(e.at_iteration(b)),
        };
        if !accepted {
            rejections += 1;
            log::debug!("iteration {b}: simulated proposal rejected");
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
        rows1.extend(theta1.iter());
        rows2.extend(theta2.iter());
    }
    if rejections > 0 {
        log::info!("{rejections} of {total} simulated proposals rejected");
    }
    let all1 = DMatrix::from_row_slice(total, d, &rows1);
    let all2 = DMatrix::from_row_slice(total, d, &rows2);
    Ok(SmdChains {
        chain1: all1.rows(burn, cfg.draws).into_owned(),
        chain2: all2.rows(burn, cfg.draws).into_owned(),
        burn_chain1: all1.rows(0, burn).into_owned(),
        burn_chain2: all2.rows(0, burn).into_owned(),
        batch_ids: (burn as u64..total as u64).collect(),
        psi_n,
        rejections,
        repairs,
        gamma: cfg.gamma,
        m: cfg.m,
        n,
        simulations: cfg.simulations,
    })
}

/// `‖ψ − ψ_S(θ)‖²_W` on fixed shocks, as an objective with a single
/// observation; the batch argument is ignored.
pub struct SmdObjective<'a, S: SimulatorModel + ?Sized, A: ?Sized> {
    sim: &'a S,
    aux: &'a A,
    target: DVector<f64>,
    units: usize,
    shocks: Vec<Vec<f64>>,
    weight: DMatrix<f64>,
    step: f64,
}

impl<'a, S, A> SmdObjective<'a, S, A>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    pub fn new(sim: &'a S, aux: &'a A, target: DVector<f64>, units: usize, shocks: Vec<Vec<f64>>, weight: Option<DMatrix<f64>>) -> Result<Self> {
        let q = aux.len();
        if target.len() != q {
            return Err(Error::Config(format!("target has length {}, expected {q}", target.len())));
        }
        if shocks.is_empty() || shocks.iter().any(|s| s.len() != sim.shock_len(units)) {
            return Err(Error::Config("shock vectors do not match the simulator".into()));
        }
        if q < sim.dim() {
            return Err(Error::Config(format!("{q} auxiliary statistics cannot identify {} parameters", sim.dim())));
        }
        let weight = weight.unwrap_or_else(|| DMatrix::identity(q, q));
        check_weight(&weight, q)?;
        Ok(Self {
            sim,
            aux,
            target,
            units,
            shocks,
            weight,
            step: JACOBIAN_STEP,
        })
    }
}

impl<S, A> ObjectiveModel for SmdObjective<'_, S, A>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    fn dim(&self) -> usize {
        self.sim.dim()
    }

    fn n_obs(&self) -> usize {
        1
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            analytic_gradient: true,
            analytic_hessian: true,
            per_observation_score: false,
        }
    }

    fn evaluate(&self, theta: &DVector<f64>, _batch: &BatchSelector) -> Result<Evaluation> {
        if !self.sim.admissible(theta) {
            return Err(Error::evaluation(theta, None, "parameter outside the simulator's domain"));
        }
        let (psi, jac) = simulated_jacobian(self.sim, self.aux, theta, self.units, &self.shocks, self.step)?;
        let resid = &self.target - psi;
        let jw = jac.transpose() * &self.weight;
        Ok(Evaluation {
            value: (resid.transpose() * &self.weight * &resid)[(0, 0)],
            gradient: &jw * &resid * -2.0,
            hessian: &jw * &jac * 2.0,
            clamped: 0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SmdEstimate {
    pub theta: DVector<f64>,
    pub optim: OptimResult,
    pub psi_n: DVector<f64>,
}

/// Classical SMD: shocks for `n` units drawn once, then Gauss-Newton.
#[allow(clippy::too_many_arguments)]
pub fn smd_point_estimate<S, A>(
    sim: &S,
    aux: &A,
    data: &S::Data,
    weight: Option<DMatrix<f64>>,
    simulations: usize,
    theta0: &DVector<f64>,
    opt: OptimizerConfig,
    stream: &RngStream,
) -> Result<SmdEstimate>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    if simulations == 0 {
        return Err(Error::Config("need at least one simulated sample".into()));
    }
    let n = sim.units(data);
    let psi_n = aux.compute(data, &BatchSelector::full(n))?;
    let shocks = draw_shocks(sim, n, simulations, &mut stream.derive(POINT_LABEL).rng());
    let obj = SmdObjective::new(sim, aux, psi_n.clone(), n, shocks, weight)?;
    let optim = minimize(&obj, &obj.full_batch(), theta0, opt.gamma, opt.max_iter, opt.tol, Conditioning::new(ConditioningKind::InverseHessian))?;
    if !optim.converged {
        log::warn!("SMD point estimate did not converge (gradient norm {:.3e})", optim.gradient_norm);
    }
    Ok(SmdEstimate {
        theta: optim.theta.clone(),
        optim,
        psi_n,
    })
}

/// Bootstrap of the SMD estimator: each replication resamples `m` units,
/// draws fresh shocks and re-solves from θ̂. The report recenters at the
/// replication mean.
#[allow(clippy::too_many_arguments)]
pub fn smd_bootstrap<S, A>(
    sim: &S,
    aux: &A,
    data: &S::Data,
    weight: Option<DMatrix<f64>>,
    simulations: usize,
    theta_hat: &DVector<f64>,
    m: usize,
    replications: usize,
    opt: OptimizerConfig,
    stream: &RngStream,
) -> Result<BootstrapDraws>
where
    S: SimulatorModel + ?Sized,
    A: AuxStatistic<S::Data> + ?Sized,
{
    let n = sim.units(data);
    let plan = ResamplePlan::iid(n, m)?;
    if simulations == 0 {
        return Err(Error::Config("need at least one simulated sample".into()));
    }
    if let Some(w) = &weight {
        check_weight(w, aux.len())?;
    }
    let shock_stream = stream.derive(SHOCK_LABEL);
    let results: Vec<(u64, Option<(DVector<f64>, bool)>)> = (0..replications as u64)
        .into_par_iter()
        .map(|id| -> Result<_> {
            let batch = plan.draw_batch(stream, id);
            let target = aux.compute(data, &batch)?;
            let shocks = draw_shocks(sim, m, simulations, &mut shock_stream.substream(id));
            let obj = SmdObjective::new(sim, aux, target, m, shocks, weight.clone())?;
            let cond = Conditioning::new(ConditioningKind::InverseHessian);
            Ok(match minimize(&obj, &obj.full_batch(), theta_hat, opt.gamma, opt.max_iter, opt.tol, cond) {
                Ok(r) if r.converged && sim.admissible(&r.theta) => (id, Some((r.theta, false))),
                Ok(_) => (id, None),
                Err(e) if e.is_numerical() => (id, None),
                Err(e) => return Err(e),
            })
        })
        .collect::<Result<_>>()?;
    collect(BootstrapMethod::Smd, theta_hat, m, n, results)
}

/// Simulator `y_i = θ + e_i` with auxiliary statistic the sample mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanSimulator;

impl SimulatorModel for MeanSimulator {
    type Data = Vec<f64>;

    fn dim(&self) -> usize {
        1
    }

    fn units(&self, data: &Vec<f64>) -> usize {
        data.len()
    }

    fn shock_len(&self, units: usize) -> usize {
        units
    }

    fn simulate(&self, theta: &DVector<f64>, units: usize, shocks: &[f64]) -> Result<Vec<f64>> {
        Ok(shocks[..units].iter().map(|e| theta[0] + e).collect())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SampleMean;

impl AuxStatistic<Vec<f64>> for SampleMean {
    fn len(&self) -> usize {
        1
    }

    fn compute(&self, data: &Vec<f64>, batch: &BatchSelector) -> Result<DVector<f64>> {
        batch.validate(data.len())?;
        let mut s = 0.0;
        batch.for_each(|i, w| s += w * data[i]);
        Ok(DVector::from_element(1, s / batch.total_weight()))
    }
}

/// Panel with `n` rows (individuals) and `T` columns (periods).
#[derive(Clone, Debug, PartialEq)]
pub struct PanelData {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl PanelData {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.shape() != x.shape() {
            return Err(Error::Model(format!("y is {:?} but x is {:?}", y.shape(), x.shape())));
        }
        if y.ncols() < 3 || y.nrows() == 0 {
            return Err(Error::Model("panel needs at least one individual and three periods".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Model("panel contains non-finite values".into()));
        }
        Ok(Self { y, x })
    }

    pub fn individuals(&self) -> usize {
        self.y.nrows()
    }

    pub fn periods(&self) -> usize {
        self.y.ncols()
    }
}

/// `y_it = ρ y_i,t−1 + β x_it + σ e_it` with `θ = (ρ, β, σ)`, simulated
/// without fixed effects from `y = 0` through a presample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicPanel {
    periods: usize,
    presample: usize,
}

impl DynamicPanel {
    pub fn new(periods: usize) -> Result<Self> {
        if periods < 3 {
            return Err(Error::Config(format!("need at least 3 periods, got {periods}")));
        }
        Ok(Self { periods, presample: 20 })
    }

    pub fn with_presample(mut self, presample: usize) -> Self {
        self.presample = presample;
        self
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    /// A data set: the simulated panel at `theta` plus fixed effects
    /// `α_i/(1−ρ)` with `α_i ~ N(0, 1)`.
    pub fn generate<R: Rng + ?Sized>(&self, theta: &DVector<f64>, n: usize, rng: &mut R) -> Result<PanelData> {
        if !self.admissible(theta) {
            return Err(Error::Config(format!("{:?} is not a stationary panel parameter", theta.as_slice())));
        }
        let shocks: Vec<f64> = (0..self.shock_len(n)).map(|_| rng.sample(StandardNormal)).collect();
        let mut panel = self.simulate(theta, n, &shocks)?;
        for i in 0..n {
            let alpha: f64 = rng.sample(StandardNormal);
            let mu = alpha / (1.0 - theta[0]);
            panel.y.row_mut(i).add_scalar_mut(mu);
        }
        Ok(panel)
    }
}

impl SimulatorModel for DynamicPanel {
    type Data = PanelData;

    fn dim(&self) -> usize {
        3
    }

    fn units(&self, data: &PanelData) -> usize {
        data.individuals()
    }

    fn shock_len(&self, units: usize) -> usize {
        2 * units * (self.presample + self.periods)
    }

    fn simulate(&self, theta: &DVector<f64>, units: usize, shocks: &[f64]) -> Result<PanelData> {
        if theta.len() != 3 {
            return Err(Error::Config(format!("panel parameter has length {}, expected 3", theta.len())));
        }
        let (rho, beta, sigma) = (theta[0], theta[1], theta[2]);
        let len = self.presample + self.periods;
        let mut y = DMatrix::zeros(units, self.periods);
        let mut x = DMatrix::zeros(units, self.periods);
        for i in 0..units {
            let s = &shocks[2 * i * len..2 * (i + 1) * len];
            let mut prev = 0.0;
            for t in 0..len {
                let (xt, et) = (s[2 * t], s[2 * t + 1]);
                prev = rho * prev + beta * xt + sigma * et;
                if t >= self.presample {
                    y[(i, t - self.presample)] = prev;
                    x[(i, t - self.presample)] = xt;
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::evaluation(theta, None, "simulated panel overflowed"));
        }
        Ok(PanelData { y, x })
    }

    fn admissible(&self, theta: &DVector<f64>) -> bool {
        theta.len() == 3 && theta[0].abs() < 1.0 && theta[2] > 0.0 && theta.iter().all(|v| v.is_finite())
    }
}

/// `I − 11′/k`.
pub fn demeaning_matrix(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)
}

/// Within (LSDV) regression of `y_t` on `(y_{t−1}, x_t)` for `t = 2..T`,
/// each series demeaned per individual: `(ρ̂, β̂, σ̂)` with `σ̂` the residual
/// standard deviation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Lsdv;

impl AuxStatistic<PanelData> for Lsdv {
    fn len(&self) -> usize {
        3
    }

    fn compute(&self, data: &PanelData, batch: &BatchSelector) -> Result<DVector<f64>> {
        lsdv(data, batch)
    }
}

pub fn lsdv(data: &PanelData, batch: &BatchSelector) -> Result<DVector<f64>> {
    batch.validate(data.individuals())?;
    let t = data.periods();
    let k = (t - 1) as f64;
    let demeaned = |i: usize| {
        let y: Vec<f64> = (1..t).map(|s| data.y[(i, s)]).collect();
        let l: Vec<f64> = (1..t).map(|s| data.y[(i, s - 1)]).collect();
        let x: Vec<f64> = (1..t).map(|s| data.x[(i, s)]).collect();
        let c = |v: Vec<f64>| {
            let mean = v.iter().sum::<f64>() / k;
            v.into_iter().map(|a| a - mean).collect::<Vec<f64>>()
        };
        (c(y), c(l), c(x))
    };
    let mut xx = nalgebra::Matrix2::<f64>::zeros();
    let mut xy = nalgebra::Vector2::<f64>::zeros();
    batch.for_each(|i, w| {
        let (y, l, x) = demeaned(i);
        for s in 0..y.len() {
            let r = nalgebra::Vector2::new(l[s], x[s]);
            xx += r * r.transpose() * w;
            xy += r * (y[s] * w);
        }
    });
    let det = xx.determinant();
    if !(det.abs() > 1e-12 * xx.trace().powi(2)) {
        return Err(Error::evaluation(&DVector::zeros(0), None, "within regressors are collinear"));
    }
    let coef = xx.try_inverse().unwrap() * xy;
    let mut ssr = 0.0;
    batch.for_each(|i, w| {
        let (y, l, x) = demeaned(i);
        for s in 0..y.len() {
            let e = y[s] - coef[0] * l[s] - coef[1] * x[s];
            ssr += w * e * e;
        }
    });
    let sigma = (ssr / (batch.total_weight() * k)).sqrt();
    Ok(DVector::from_vec(vec![coef[0], coef[1], sigma]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn mean_data(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| 1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn sample_mean_recursions_hold_exactly() {
        let data = mean_data(60, 1);
        let ybar = data.iter().sum::<f64>() / 60.0;
        let gamma = 0.3;
        let cfg = SmdConfig::new(gamma, 40, 12, 3, DVector::from_element(1, 0.0), RngStream::new(9, 2)).with_burn(0);
        let out = run_smd_pair(&MeanSimulator, &SampleMean, &data, &cfg).unwrap();

        // Replay: θ¹ − ȳ = (1−γ)(θ¹ − ȳ) + γ(ψ_m − ȳ − ē),  θ² = (1−γ)θ² + γ(ψ_m − ȳ).
        let plan = ResamplePlan::iid(60, 12).unwrap();
        let (mut t1, mut t2) = (0.0f64, 0.0f64);
        for b in 0..40u64 {
            let batch = plan.draw_batch(&cfg.stream, b);
            let BatchSelector::Indices(idx) = batch else { unreachable!() };
            let psi_m = idx.iter().map(|&i| data[i]).sum::<f64>() / 12.0;
            let shocks = draw_shocks(&MeanSimulator, 12, 3, &mut cfg.shock_stream().substream(b));
            let ebar = shocks.iter().flatten().sum::<f64>() / 36.0;
            t1 = ybar + (1.0 - gamma) * (t1 - ybar) + gamma * (psi_m - ybar - ebar);
            t2 = (1.0 - gamma) * t2 + gamma * (psi_m - ybar);
            assert!((out.chain1[(b as usize, 0)] - t1).abs() < 1e-12, "chain 1 at {b}");
            assert!((out.chain2[(b as usize, 0)] - t2).abs() < 1e-12, "chain 2 at {b}");
        }
    }

    #[test]
    fn chain2_does_not_depend_on_simulation_count() {
        let data = mean_data(80, 3);
        let run = |s| {
            let cfg = SmdConfig::new(0.5, 200, 20, s, DVector::from_element(1, 0.5), RngStream::new(4, 0));
            run_smd_pair(&MeanSimulator, &SampleMean, &data, &cfg).unwrap()
        };
        let (a, b) = (run(1), run(5));
        assert!((a.chain2 - b.chain2).amax() < 1e-9);
    }

    #[test]
    fn simulated_chain_is_noisier() {
        let data = mean_data(400, 5);
        let cfg = SmdConfig::new(0.3, 2000, 40, 1, DVector::from_element(1, 0.0), RngStream::new(6, 1));
        let out = run_smd_pair(&MeanSimulator, &SampleMean, &data, &cfg).unwrap();
        let var = |m: &DMatrix<f64>| crate::linalg::covariance(m, 0)[(0, 0)];
        assert!(var(&out.chain1) >= var(&out.chain2));
        let rep = out.report(0.05).unwrap();
        assert_eq!(rep.method, "smd_rnr");
        assert!(rep.ci[0].0 < rep.theta_bar[0] && rep.theta_bar[0] < rep.ci[0].1);
    }

    #[test]
    fn mean_jacobian_is_one() {
        let shocks = draw_shocks(&MeanSimulator, 10, 2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let (_, j) = simulated_jacobian(&MeanSimulator, &SampleMean, &DVector::from_element(1, 0.7), 10, &shocks, JACOBIAN_STEP).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn point_estimate_is_mean_minus_shock_mean() {
        let data = mean_data(50, 8);
        let stream = RngStream::new(2, 7);
        let est = smd_point_estimate(&MeanSimulator, &SampleMean, &data, None, 4, &DVector::from_element(1, 3.0), OptimizerConfig::default(), &stream).unwrap();
        let shocks = draw_shocks(&MeanSimulator, 50, 4, &mut stream.derive(POINT_LABEL).rng());
        let ebar = shocks.iter().flatten().sum::<f64>() / 200.0;
        let ybar = data.iter().sum::<f64>() / 50.0;
        assert!((est.theta[0] - (ybar - ebar)).abs() < 1e-10);
    }

    #[test]
    fn demeaning_annihilates_constants() {
        for k in 2..8 {
            let a = demeaning_matrix(k);
            assert!((&a * DVector::from_element(k, 1.0)).amax() < 1e-15);
            assert!((&a * &a - &a).amax() < 1e-14);
        }
    }

    fn panel(n: usize, seed: u64) -> (DynamicPanel, PanelData) {
        let model = DynamicPanel::new(5).unwrap();
        let theta = DVector::from_vec(vec![0.6, 1.0, 1.0]);
        let data = model.generate(&theta, n, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (model, data)
    }

    #[test]
    fn lsdv_matches_matrix_form() {
        let (_, data) = panel(30, 2);
        let a = demeaning_matrix(4);
        let mut rows_x = Vec::new();
        let mut rows_y = Vec::new();
        for i in 0..30 {
            let y = a.clone() * DVector::from_iterator(4, (1..5).map(|t| data.y[(i, t)]));
            let l = a.clone() * DVector::from_iterator(4, (0..4).map(|t| data.y[(i, t)]));
            let x = a.clone() * DVector::from_iterator(4, (1..5).map(|t| data.x[(i, t)]));
            for s in 0..4 {
                rows_x.extend([l[s], x[s]]);
                rows_y.push(y[s]);
            }
        }
        let xm = DMatrix::from_row_slice(120, 2, &rows_x);
        let ym = DVector::from_vec(rows_y);
        let coef = (xm.transpose() * &xm).try_inverse().unwrap() * xm.transpose() * &ym;
        let got = lsdv(&data, &BatchSelector::full(30)).unwrap();
        assert!((got[0] - coef[0]).abs() < 1e-12 && (got[1] - coef[1]).abs() < 1e-12);
        let resid = &ym - &xm * &coef;
        assert!((got[2] - (resid.norm_squared() / 120.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fixed_effects_do_not_change_lsdv() {
        let model = DynamicPanel::new(5).unwrap();
        let theta = DVector::from_vec(vec![0.6, 1.0, 1.0]);
        let shocks = draw_shocks(&model, 20, 1, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).remove(0);
        let plain = model.simulate(&theta, 20, &shocks).unwrap();
        let mut shifted = plain.clone();
        for i in 0..20 {
            shifted.y.row_mut(i).add_scalar_mut(i as f64 - 7.5);
        }
        let full = BatchSelector::full(20);
        assert!((lsdv(&plain, &full).unwrap() - lsdv(&shifted, &full).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn lsdv_autoregression_is_biased_down() {
        let (_, data) = panel(1000, 4);
        let est = lsdv(&data, &BatchSelector::full(1000)).unwrap();
        assert!(est[0] < 0.5, "within estimate {} should sit well below 0.6", est[0]);
    }

    #[test]
    fn panel_jacobian_agrees_with_wide_differences() {
        let model = DynamicPanel::new(5).unwrap();
        let shocks = draw_shocks(&model, 200, 1, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let theta = DVector::from_vec(vec![0.6, 1.0, 1.0]);
        let (_, j) = simulated_jacobian(&model, &Lsdv, &theta, 200, &shocks, JACOBIAN_STEP).unwrap();
        for c in 0..3 {
            let h = 1e-2;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[c] += h;
            dn[c] -= h;
            let fu = simulated_statistic(&model, &Lsdv, &up, 200, &shocks).unwrap();
            let fd = simulated_statistic(&model, &Lsdv, &dn, 200, &shocks).unwrap();
            let brute = (fu - fd) / (2.0 * h);
            for r in 0..3 {
                let scale = brute[r].abs().max(0.05);
                assert!((j[(r, c)] - brute[r]).abs() <= 0.05 * scale, "entry ({r},{c}): {} vs {}", j[(r, c)], brute[r]);
            }
        }
    }

    #[test]
    fn panel_chain_corrects_within_bias() {
        let (model, data) = panel(1000, 11);
        let start = lsdv(&data, &BatchSelector::full(1000)).unwrap();
        let cfg = SmdConfig::new(0.3, 300, 200, 1, start, RngStream::new(5, 0));
        let out = run_smd_pair(&model, &Lsdv, &data, &cfg).unwrap();
        let rep = out.report(0.05).unwrap();
        assert!((rep.theta_bar[0] - 0.6).abs() < 0.06, "rho {}", rep.theta_bar[0]);
        assert!(rep.se.iter().all(|s| *s > 0.0 && *s < 0.2));
    }

    #[test]
    fn inadmissible_start_is_rejected() {
        let (model, data) = panel(50, 1);
        let cfg = SmdConfig::new(0.3, 10, 20, 1, DVector::from_vec(vec![1.2, 1.0, 1.0]), RngStream::new(0, 0));
        assert!(matches!(run_smd_pair(&model, &Lsdv, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn bootstrap_recenters_on_replication_mean() {
        let data = mean_data(60, 12);
        let stream = RngStream::new(3, 3);
        let est = smd_point_estimate(&MeanSimulator, &SampleMean, &data, None, 2, &DVector::zeros(1), OptimizerConfig::default(), &stream).unwrap();
        let boot = smd_bootstrap(&MeanSimulator, &SampleMean, &data, None, 2, &est.theta, 60, 200, OptimizerConfig::default(), &stream).unwrap();
        assert_eq!(boot.draws.nrows(), 200);
        let rep = boot.report(0.1).unwrap();
        let mean = crate::linalg::column_means(&boot.draws)[0];
        let mut shifted: Vec<f64> = boot.draws.column(0).iter().map(|t| est.theta[0] + t - mean).collect();
        shifted.sort_by(|a, b| a.total_cmp(b));
        assert!((rep.ci[0].0 - crate::linalg::quantile_sorted(&shifted, 0.05)).abs() < 1e-12);
        assert!((rep.ci[0].1 - crate::linalg::quantile_sorted(&shifted, 0.95)).abs() < 1e-12);
        assert_eq!(rep.theta_bar[0], est.theta[0]);
    }
}
