//! Diagnostics for stored draws: AR(1) persistence, trace summaries,
//! burn-in adequacy and, when the sidecar allows a replay, the coupling
//! distance.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::Method;
use super::dgp::{self, Sample};
use super::draws::{read_draws, DrawsMeta};
use super::run::{build_plan, replication_stream, DATA_LABEL};
use crate::chains::DrawHistory;
use crate::error::{Error, Result};
use crate::inference::{self, CouplingLinearization};
use crate::models::ObjectiveModel;

/// Largest standardized gap between early and late retained draws that
/// still counts as converged.
pub const BURN_Z_LIMIT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub ar1: f64,
    pub ar1_se: f64,
    /// `|ar1 − (1 − γ)| ≤ 3·se`.
    pub ar1_pass: bool,
    /// Gap between the first and last quarter of the retained draws in
    /// units of its long-run standard error.
    pub burn_z: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub mean_distance: f64,
    pub max_distance: f64,
    pub mean_deviation: f64,
    /// `mean_distance / mean_deviation`.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub gamma: f64,
    pub target: f64,
    pub draws: usize,
    pub burn: usize,
    pub coordinates: Vec<CoordinateDiagnostics>,
    pub ar1_pass: bool,
    pub burn_adequate: bool,
    pub degenerate: bool,
    pub coupling: Option<CouplingSummary>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Diagnostics of the retained rows (`rows` after the first `burn`).
pub fn diagnose_draws(rows: &DMatrix<f64>, burn: usize, gamma: f64, names: &[String]) -> Result<DiagnosticsReport> {
    if burn >= rows.nrows() {
        return Err(Error::Config(format!("burn-in {burn} leaves no retained draws out of {}", rows.nrows())));
    }
    let kept = rows.rows(burn, rows.nrows() - burn).into_owned();
    let b = kept.nrows();
    let ar1 = inference::ar1_diagnostic(&kept, gamma)?;
    let mut coords = Vec::new();
    for j in 0..kept.ncols() {
        let col: Vec<f64> = kept.column(j).iter().copied().collect();
        let mu = mean(&col);
        let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / b as f64).sqrt();
        let degenerate = ar1.degenerate[j] || sd == 0.0;
        let q = b / 4;
        let burn_z = if degenerate || q < 2 {
            f64::NAN
        } else {
            let rho = ar1.coefficients[j].clamp(0.0, 0.99);
            let lrv = sd * sd * (1.0 + rho) / (1.0 - rho);
            let gap = mean(&col[..q]) - mean(&col[b - q..]);
            gap.abs() / (2.0 * lrv / q as f64).sqrt()
        };
        coords.push(CoordinateDiagnostics {
            name: names.get(j).cloned().unwrap_or_else(|| format!("theta_{}", j + 1)),
            mean: mu,
            sd,
            min: col.iter().copied().fold(f64::INFINITY, f64::min),
            max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ar1: ar1.coefficients[j],
            ar1_se: ar1.standard_errors[j],
            ar1_pass: ar1.pass[j],
            burn_z,
            degenerate,
        });
    }
    Ok(DiagnosticsReport {
        gamma,
        target: 1.0 - gamma,
        draws: b,
        burn,
        ar1_pass: coords.iter().all(|c| c.ar1_pass),
        burn_adequate: coords.iter().all(|c| c.burn_z <= BURN_Z_LIMIT),
        degenerate: coords.iter().any(|c| c.degenerate),
        coordinates: coords,
        coupling: None,
    })
}

/// Rebuilds the sample and chain history from the sidecar and measures the
/// distance to the linearized chain.
fn replay_coupling(meta: &DrawsMeta, rows: &DMatrix<f64>, ids: &[u64]) -> Result<Option<CouplingSummary>> {
    let (Some(cfg), Some(echo), Some(theta_hat)) = (&meta.config, &meta.echo, &meta.theta_hat) else {
        return Ok(None);
    };
    if !matches!(meta.method, Method::Rnr | Method::Rgd | Method::Rqn) {
        return Ok(None);
    }
    let prepared = dgp::prepare(&cfg.model, &mut replication_stream(cfg.seed, 0).derive(DATA_LABEL).rng())?;
    let plan = build_plan(cfg, &prepared, echo.m)?;
    let burn = meta.burn;
    let d = rows.ncols();
    let history = DrawHistory {
        theta0: DVector::from_iterator(d, cfg.chain.theta0.clone().unwrap_or_else(|| vec![0.0; d])),
        burn_draws: rows.rows(0, burn).into_owned(),
        draws: rows.rows(burn, rows.nrows() - burn).into_owned(),
        burn_batch_ids: ids[..burn].to_vec(),
        batch_ids: ids[burn..].to_vec(),
        rejections: meta.rejections,
        repairs: 0,
        echo: echo.clone(),
        plan,
    };
    let theta_hat = DVector::from_column_slice(theta_hat);
    let run = |model: &dyn ObjectiveModel| inference::coupling_sequence(model, &theta_hat, &history, CouplingLinearization::BatchHessian);
    let report = match &prepared.sample {
        Sample::Ols(m) => run(m)?,
        Sample::Probit(m) => run(m)?,
        Sample::Ma1(m) => run(m)?,
        Sample::Panel(..) | Sample::Mean(_) => return Ok(None),
    };
    Ok(Some(CouplingSummary {
        mean_distance: report.mean_distance,
        max_distance: report.max_distance,
        mean_deviation: report.mean_deviation,
        relative: report.mean_distance / report.mean_deviation,
    }))
}

/// Reads a draws file (and its sidecar, if present) and diagnoses it.
/// `gamma` overrides the sidecar's learning rate and is required without one.
pub fn cmd_diagnose(path: &Path, gamma: Option<f64>) -> Result<DiagnosticsReport> {
    let file = read_draws(path)?;
    let gamma = gamma
        .or(file.meta.as_ref().map(|m| m.gamma))
        .ok_or_else(|| Error::Config("no sidecar found; pass the learning rate explicitly".into()))?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("learning rate must lie in (0, 1], got {gamma}")));
    }
    let burn = file.meta.as_ref().map_or(0, |m| m.burn);
    let names = file.meta.as_ref().map(|m| m.names.clone()).unwrap_or_default();
    let mut report = diagnose_draws(&file.rows, burn, gamma, &names)?;
    if let Some(meta) = &file.meta {
        match replay_coupling(meta, &file.rows, &file.batch_ids) {
            Ok(c) => report.coupling = c,
            Err(e) => log::warn!("coupling replay unavailable: {e}"),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn ar1_series(phi: f64, b: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        DMatrix::from_fn(b, 1, |_, _| {
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
            x
        })
    }

    #[test]
    fn persistent_draws_pass() {
        let rep = diagnose_draws(&ar1_series(0.7, 4000, 1), 0, 0.3, &[]).unwrap();
        assert!(rep.ar1_pass && rep.burn_adequate && !rep.degenerate);
        assert_eq!(rep.coordinates[0].name, "theta_1");
    }

    #[test]
    fn white_noise_fails_the_persistence_target() {
        let rep = diagnose_draws(&ar1_series(0.0, 2000, 2), 0, 0.3, &[]).unwrap();
        assert!(rep.coordinates[0].ar1.abs() < 0.1);
        assert!(!rep.ar1_pass);
    }

    #[test]
    fn constant_draws_are_degenerate_everywhere() {
        let rep = diagnose_draws(&DMatrix::from_element(100, 2, 1.5), 0, 0.3, &[]).unwrap();
        assert!(rep.degenerate && !rep.ar1_pass && !rep.burn_adequate);
        assert!(rep.coordinates.iter().all(|c| c.degenerate));
    }

    #[test]
    fn drifting_draws_fail_the_burn_check() {
        let mut rows = ar1_series(0.7, 2000, 3);
        for i in 0..2000 {
            rows[(i, 0)] += 10.0 * (-(i as f64) / 300.0).exp();
        }
        assert!(!diagnose_draws(&rows, 0, 0.3, &[]).unwrap().burn_adequate);
    }
}
