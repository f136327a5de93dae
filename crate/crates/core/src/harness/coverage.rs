//! Monte Carlo size of the confidence intervals.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::dgp;
use super::run::{self, testable, DATA_LABEL};
use crate::baselines::MAX_FAILURE_SHARE;
use crate::error::{Error, Result};

/// Rejection rate of one method for one coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: String,
    pub kind: Method,
    pub gamma: Option<f64>,
    pub m: usize,
    pub b: usize,
    pub seed: u64,
    pub coordinate: String,
    pub truth: f64,
    /// Share of replications whose interval excludes the truth.
    pub rejection_rate: f64,
    /// `√(rate(1 − rate)/R)` over the successful replications.
    pub mc_se: f64,
    /// Successful replications.
    pub replications: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub mean_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub replications: usize,
    pub alpha: f64,
    pub rows: Vec<CoverageRow>,
}

impl CoverageResult {
    pub fn row(&self, method: &str, coordinate: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.method == method && r.coordinate == coordinate)
    }
}

/// Outcome of one method in one replication.
struct Cell {
    label: String,
    kind: Method,
    gamma: Option<f64>,
    m: usize,
    b: usize,
    /// `(rejects, estimate, se)` per coordinate; `None` on failure.
    result: Option<Vec<(bool, f64, f64)>>,
    testable: bool,
}

/// Runs `R` replications in parallel; replication `r` uses stream `r` of
/// the seed, so results do not depend on the number of workers.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<CoverageResult> {
    cfg.validate()?;
    let truth = dgp::true_theta(&cfg.model).ok_or_else(|| Error::Config("coverage needs a synthetic design (model.dgp)".into()))?;
    let names = dgp::default_names(cfg.model.kind, truth.len());
    let reps = cfg.replications;
    let per_rep: Vec<Option<Vec<Cell>>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let stream = run::replication_stream(cfg.seed, r);
            let prepared = match dgp::prepare(&cfg.model, &mut stream.derive(DATA_LABEL).rng()) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("replication {r}: data generation failed: {e}");
                    return None;
                }
            };
            let runs = run::run_methods(cfg, &prepared, &stream);
            Some(
                runs.runs
                    .into_iter()
                    .map(|mr| {
                        let testable = mr.report.as_ref().is_none_or(testable);
                        let result = mr.report.map(|rep| {
                            (0..truth.len())
                                .map(|j| (rep.rejects(j, truth[j]), rep.theta_bar[j], rep.se[j]))
                                .collect()
                        });
                        Cell {
                            label: mr.label,
                            kind: mr.method,
                            gamma: mr.gamma,
                            m: mr.m,
                            b: mr.b,
                            result,
                            testable,
                        }
                    })
                    .collect(),
            )
        })
        .collect();

    let Some(template) = per_rep.iter().flatten().next() else {
        return Err(Error::Replications {
            failed: reps,
            total: reps,
            limit: (MAX_FAILURE_SHARE * reps as f64).floor() as usize,
        });
    };
    let limit = (MAX_FAILURE_SHARE * reps as f64).floor() as usize;
    let mut rows = Vec::new();
    for (k, cell) in template.iter().enumerate() {
        if !cell.testable {
            log::info!("{} reports no intervals; left out of the coverage table", cell.label);
            continue;
        }
        let results: Vec<Option<&Vec<(bool, f64, f64)>>> = per_rep
            .iter()
            .map(|rep| rep.as_ref().and_then(|cells| cells[k].result.as_ref()))
            .collect();
        let failures = results.iter().filter(|r| r.is_none()).count();
        if failures > limit {
            return Err(Error::Replications { failed: failures, total: reps, limit });
        }
        let ok: Vec<&Vec<(bool, f64, f64)>> = results.into_iter().flatten().collect();
        let used = ok.len();
        for (j, name) in names.iter().enumerate() {
            let rejections = ok.iter().filter(|v| v[j].0).count();
            let rate = rejections as f64 / used as f64;
            rows.push(CoverageRow {
                method: cell.label.clone(),
                kind: cell.kind,
                gamma: cell.gamma,
                m: cell.m,
                b: cell.b,
                seed: cfg.seed,
                coordinate: name.clone(),
                truth: truth[j],
                rejection_rate: rate,
                mc_se: (rate * (1.0 - rate) / used as f64).sqrt(),
                replications: used,
                failures,
                mean_estimate: ok.iter().map(|v| v[j].1).sum::<f64>() / used as f64,
                mean_se: ok.iter().map(|v| v[j].2).sum::<f64>() / used as f64,
            });
        }
    }
    Ok(CoverageResult {
        replications: reps,
        alpha: cfg.alpha,
        rows,
    })
}

/// Runs the study and writes `coverage.csv` and `coverage.json`.
pub fn cmd_coverage(cfg: &ExperimentConfig) -> Result<(CoverageResult, Vec<PathBuf>)> {
    let result = run_coverage(cfg)?;
    std::fs::create_dir_all(&cfg.output)?;
    let csv_path = cfg.output.join("coverage.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "method",
        "gamma",
        "m",
        "B",
        "seed",
        "coordinate",
        "truth",
        "rejection_rate",
        "mc_se",
        "replications",
        "failures",
        "mean_estimate",
        "mean_se",
    ])?;
    for r in &result.rows {
        w.write_record([
            r.method.clone(),
            r.gamma.map(|g| g.to_string()).unwrap_or_default(),
            r.m.to_string(),
            r.b.to_string(),
            r.seed.to_string(),
            r.coordinate.clone(),
            r.truth.to_string(),
            format!("{:.6}", r.rejection_rate),
            format!("{:.6}", r.mc_se),
            r.replications.to_string(),
            r.failures.to_string(),
            format!("{:.6}", r.mean_estimate),
            format!("{:.6}", r.mean_se),
        ])?;
    }
    w.flush()?;
    let json_path = cfg.output.join("coverage.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&result)? + "\n")?;
    Ok((result, vec![csv_path, json_path]))
}
