//! `fit`: every configured method on one sample, written to the output directory.

use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use super::config::{ExperimentConfig, ModelKind};
use super::dgp;
use super::draws::{write_draws, DrawsMeta};
use super::run::{self, MethodRun, SampleRuns, DATA_LABEL};
use crate::error::Result;

/// Overall outcome of a command, mapped to the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    /// Some methods failed.
    Partial,
    /// Every method failed.
    Failed,
}

impl Status {
    pub fn of(runs: &SampleRuns) -> Self {
        if runs.all_ok() {
            Status::Success
        } else if runs.any_ok() {
            Status::Partial
        } else {
            Status::Failed
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub names: Vec<String>,
    pub runs: SampleRuns,
    pub status: Status,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    seed: u64,
    model: ModelKind,
    n: usize,
    names: &'a [String],
    theta_hat: Option<Vec<f64>>,
    status: Status,
    runs: &'a [MethodRun],
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

/// `method, gamma, m, B, seed, est_*, se_*, status`: estimates then
/// standard errors, one row per method.
pub fn write_table(path: &std::path::Path, names: &[String], runs: &[MethodRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["method", "gamma", "m", "B", "seed"].iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().map(|n| format!("est_{n}")));
    header.extend(names.iter().map(|n| format!("se_{n}")));
    header.push("status".into());
    w.write_record(&header)?;
    for r in runs {
        let mut rec = vec![
            r.label.clone(),
            r.gamma.map(|g| g.to_string()).unwrap_or_default(),
            r.m.to_string(),
            r.b.to_string(),
            r.seed.to_string(),
        ];
        match &r.report {
            Some(rep) => {
                rec.extend(rep.theta_bar.iter().map(|v| fmt(*v)));
                rec.extend(rep.se.iter().map(|v| fmt(*v)));
                rec.push("ok".into());
            }
            None => {
                rec.extend(std::iter::repeat_n(String::new(), 2 * names.len()));
                rec.push(r.error.clone().unwrap_or_default().replace('\n', " "));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured methods on one sample (replication 0 of the seed)
/// and writes `report.json`, `table.csv` and one draws file per chain.
/// `draws.csv` holds the first chain.
pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let stream = run::replication_stream(cfg.seed, 0);
    let prepared = dgp::prepare(&cfg.model, &mut stream.derive(DATA_LABEL).rng())?;
    let runs = run::run_methods(cfg, &prepared, &stream);
    let status = Status::of(&runs);
    std::fs::create_dir_all(&cfg.output)?;
    let mut files = Vec::new();

    let report = FitReport {
        seed: cfg.seed,
        model: cfg.model.kind,
        n: runs.n,
        names: &prepared.names,
        theta_hat: runs.theta_hat.as_ref().map(|t| t.iter().copied().collect()),
        status,
        runs: &runs.runs,
    };
    let path = cfg.output.join("report.json");
    let mut f = std::fs::File::create(&path)?;
    f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    f.write_all(b"\n")?;
    files.push(path);

    let path = cfg.output.join("table.csv");
    write_table(&path, &prepared.names, &runs.runs)?;
    files.push(path);

    let mut first = true;
    for r in &runs.runs {
        let Some(trace) = &r.trace else { continue };
        let meta = DrawsMeta {
            label: r.label.clone(),
            method: r.method,
            names: prepared.names.clone(),
            burn: trace.burn,
            gamma: r.gamma.unwrap_or(1.0),
            m: r.m,
            n: runs.n,
            seed: cfg.seed,
            rejections: trace.rejections,
            echo: trace.echo.clone(),
            theta_hat: runs.theta_hat.as_ref().map(|t| t.iter().copied().collect()),
            config: Some(cfg.clone()),
        };
        let mut targets = vec![cfg.output.join(format!("draws_{}.csv", r.label))];
        if first {
            targets.push(cfg.output.join("draws.csv"));
            first = false;
        }
        for path in targets {
            write_draws(&path, trace, &meta)?;
            files.push(path);
        }
    }
    log::info!("fit finished with status {status:?}; {} files in {}", files.len(), cfg.output.display());
    Ok(FitOutput {
        names: prepared.names,
        runs,
        status,
        files,
    })
}
