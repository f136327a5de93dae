//! Synthetic designs and data loading for experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Exp, StandardNormal, StudentT};

use super::config::{DgpParams, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::models::{ColumnRoles, DataSet, Ma1, Ols, Probit};
use crate::smd::{DynamicPanel, PanelData};

/// One sample ready for estimation.
#[derive(Clone, Debug)]
pub enum Sample {
    Ols(Ols),
    Probit(Probit),
    Ma1(Ma1),
    Panel(DynamicPanel, PanelData),
    Mean(Vec<f64>),
}

impl Sample {
    pub fn kind(&self) -> ModelKind {
        match self {
            Sample::Ols(_) => ModelKind::Ols,
            Sample::Probit(_) => ModelKind::Probit,
            Sample::Ma1(_) => ModelKind::Ma1,
            Sample::Panel(..) => ModelKind::Panel,
            Sample::Mean(_) => ModelKind::Mean,
        }
    }

    /// Resampling units: observations, periods or individuals.
    pub fn n(&self) -> usize {
        use crate::models::ObjectiveModel;
        match self {
            Sample::Ols(m) => m.n_obs(),
            Sample::Probit(m) => m.n_obs(),
            Sample::Ma1(m) => m.n_obs(),
            Sample::Panel(_, d) => d.individuals(),
            Sample::Mean(y) => y.len(),
        }
    }
}

/// A sample with coordinate names and optional cluster labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: Sample,
    pub names: Vec<String>,
    pub clusters: Option<Vec<i64>>,
}

pub const OLS_N: usize = 200;
pub const PROBIT_N: usize = 750;
pub const MA1_N: usize = 500;
pub const PANEL_N: usize = 1000;
pub const PANEL_T: usize = 5;
pub const MEAN_N: usize = 1000;

/// θ⁰ of the synthetic design.
pub fn default_theta(kind: ModelKind) -> Vec<f64> {
    match kind {
        ModelKind::Ols => vec![1.0, 1.0],
        ModelKind::Probit => vec![0.3, 0.5, -0.4, 0.3, -0.2, 0.2, 0.4, -0.3],
        ModelKind::Ma1 => vec![0.0, 0.8],
        ModelKind::Panel => vec![0.6, 1.0, 1.0],
        ModelKind::Mean => vec![1.0],
    }
}

fn default_n(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Ols => OLS_N,
        ModelKind::Probit => PROBIT_N,
        ModelKind::Ma1 => MA1_N,
        ModelKind::Panel => PANEL_N,
        ModelKind::Mean => MEAN_N,
    }
}

/// `y = β₀ + β₁x + e` with `x ~ Exp(rate 2)` and `e ~ t(6)`; extra
/// coefficients get further `Exp(2)` regressors.
pub fn ols_design<R: Rng + ?Sized>(n: usize, beta: &[f64], rng: &mut R) -> Result<Ols> {
    if beta.len() < 2 {
        return Err(Error::Config("the regression design needs an intercept and a slope".into()));
    }
    let exp = Exp::new(2.0).unwrap();
    let t6 = StudentT::new(6.0).unwrap();
    let d = beta.len();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..d {
            x[(i, j)] = rng.sample(exp);
        }
        let e: f64 = rng.sample(t6);
        y[i] = (0..d).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + e;
    }
    Ols::new(&x, &y)
}

/// Intercept plus regressors alternating `N(0,1)` and `Bernoulli(1/2)`
/// (the latter centered), with a latent standard normal error.
pub fn probit_design<R: Rng + ?Sized>(n: usize, beta: &[f64], rng: &mut R) -> Result<Probit> {
    if beta.is_empty() {
        return Err(Error::Config("probit design needs at least an intercept".into()));
    }
    let coin = Bernoulli::new(0.5).unwrap();
    let d = beta.len();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..d {
            x[(i, j)] = if j % 3 == 0 {
                f64::from(u8::from(rng.sample(coin))) - 0.5
            } else {
                rng.sample(StandardNormal)
            };
        }
        let latent: f64 = (0..d).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + rng.sample::<f64, _>(StandardNormal);
        y[i] = f64::from(u8::from(latent > 0.0));
    }
    Probit::new(&x, &y)
}

/// `y_t = μ + e_t + ψe_{t−1}` with standard normal `e`.
pub fn ma1_design<R: Rng + ?Sized>(n: usize, theta: &[f64], rng: &mut R) -> Result<Ma1> {
    if theta.len() != 2 {
        return Err(Error::Config("MA(1) parameter is (mu, psi)".into()));
    }
    let mut prev: f64 = rng.sample(StandardNormal);
    let y: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            let v = theta[0] + e + theta[1] * prev;
            prev = e;
            v
        })
        .collect();
    Ma1::new(&y)
}

/// `y_i = μ + e_i` with standard normal `e`.
pub fn mean_design<R: Rng + ?Sized>(n: usize, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if theta.len() != 1 {
        return Err(Error::Config("mean parameter has one coordinate".into()));
    }
    Ok((0..n).map(|_| theta[0] + rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Coordinate names of the synthetic designs.
pub fn default_names(kind: ModelKind, d: usize) -> Vec<String> {
    match kind {
        ModelKind::Ma1 => vec!["mu".into(), "psi".into()],
        ModelKind::Panel => vec!["rho".into(), "beta".into(), "sigma".into()],
        ModelKind::Mean => vec!["mu".into()],
        ModelKind::Ols | ModelKind::Probit => (0..d).map(|j| format!("beta_{j}")).collect(),
    }
}

/// Draws one synthetic sample.
pub fn generate<R: Rng + ?Sized>(kind: ModelKind, params: &DgpParams, rng: &mut R) -> Result<Prepared> {
    let theta = params.theta.clone().unwrap_or_else(|| default_theta(kind));
    let n = params.n.unwrap_or_else(|| default_n(kind));
    let sample = match kind {
        ModelKind::Ols => Sample::Ols(ols_design(n, &theta, rng)?),
        ModelKind::Probit => Sample::Probit(probit_design(n, &theta, rng)?),
        ModelKind::Ma1 => Sample::Ma1(ma1_design(n, &theta, rng)?),
        ModelKind::Mean => Sample::Mean(mean_design(n, &theta, rng)?),
        ModelKind::Panel => {
            let model = DynamicPanel::new(params.periods.unwrap_or(PANEL_T))?;
            let data = model.generate(&DVector::from_vec(theta.clone()), n, rng)?;
            Sample::Panel(model, data)
        }
    };
    Ok(Prepared {
        names: default_names(kind, theta.len()),
        sample,
        clusters: None,
    })
}

/// True parameter of a synthetic design.
pub fn true_theta(spec: &ModelSpec) -> Option<DVector<f64>> {
    let dgp = spec.dgp.as_ref()?;
    Some(DVector::from_vec(dgp.theta.clone().unwrap_or_else(|| default_theta(spec.kind))))
}

/// Reads the data file named in `spec`. Without explicit regressors every
/// column other than the response and cluster columns is used.
pub fn load(spec: &ModelSpec) -> Result<Prepared> {
    let path = spec.file.as_ref().ok_or_else(|| Error::Config("model.file is not set".into()))?;
    let roles = ColumnRoles {
        response: spec.response.clone(),
        cluster: spec.cluster.clone(),
        time_series: spec.kind == ModelKind::Ma1,
    };
    let data = DataSet::from_csv(path, &roles)?;
    let regressors: Vec<String> = if spec.regressors.is_empty() {
        data.names()
            .iter()
            .filter(|c| Some(*c) != spec.response.as_ref() && Some(*c) != spec.cluster.as_ref())
            .cloned()
            .collect()
    } else {
        spec.regressors.clone()
    };
    let mut names: Vec<String> = Vec::new();
    if spec.intercept {
        names.push("const".into());
    }
    names.extend(regressors.iter().cloned());
    let sample = match spec.kind {
        ModelKind::Ols => Sample::Ols(Ols::from_dataset(&data, &regressors, spec.intercept)?),
        ModelKind::Probit => Sample::Probit(Probit::from_dataset(&data, &regressors, spec.intercept)?),
        ModelKind::Ma1 => {
            names = default_names(ModelKind::Ma1, 2);
            Sample::Ma1(Ma1::from_dataset(&data)?)
        }
        ModelKind::Panel | ModelKind::Mean => return Err(Error::Config("simulation-based models run on synthetic data only".into())),
    };
    Ok(Prepared {
        sample,
        names,
        clusters: data.cluster_ids().map(<[i64]>::to_vec),
    })
}

/// Loads the configured file or draws from the configured design.
pub fn prepare<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Prepared> {
    match &spec.dgp {
        Some(params) => generate(spec.kind, params, rng),
        None => load(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ols_design_recovers_slope_in_large_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ols = ols_design(20_000, &[1.0, 1.0], &mut rng).unwrap();
        let b = ols.fit().unwrap();
        assert!((b[0] - 1.0).abs() < 0.05 && (b[1] - 1.0).abs() < 0.05);
        // Exp(rate 2) has mean 1/2.
        let xbar = ols.design().column(1).mean();
        assert!((xbar - 0.5).abs() < 0.02);
    }

    #[test]
    fn probit_design_is_balanced_enough() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = probit_design(750, &default_theta(ModelKind::Probit), &mut rng).unwrap();
        let share = p.response().mean();
        assert!(share > 0.3 && share < 0.8, "share {share}");
    }

    #[test]
    fn ma1_design_has_theoretical_autocorrelation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let y = ma1_design(50_000, &[0.0, 0.8], &mut rng).unwrap();
        let s = y.series();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let c0: f64 = s.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = s.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!((c1 / c0 - 0.8 / 1.64).abs() < 0.02);
    }

    #[test]
    fn file_loading_uses_remaining_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,a,b,g\n1,0,1,1\n2,1,0,1\n3,1,1,2\n5,2,1,2\n4,0,2,3\n").unwrap();
        let spec = ModelSpec {
            kind: ModelKind::Ols,
            dgp: None,
            file: Some(path),
            response: Some("y".into()),
            regressors: vec![],
            intercept: true,
            cluster: Some("g".into()),
        };
        let p = load(&spec).unwrap();
        assert_eq!(p.names, vec!["const", "a", "b"]);
        assert_eq!(p.clusters.unwrap(), vec![1, 1, 2, 2, 3]);
        assert_eq!(p.sample.n(), 5);
    }
}
