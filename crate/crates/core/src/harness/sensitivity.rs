//! Leave-one-group-out sensitivity of the chain average.

use std::collections::BTreeSet;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind, ResamplingKind};
use super::dgp::{self, Sample};
use super::run::{label_id, replication_stream, DATA_LABEL};
use crate::chains::{self, ChainConfig};
use crate::conditioning::Conditioning;
use crate::error::{Error, Result};
use crate::inference::{self, InferenceReport};
use crate::linalg;
use crate::models::ObjectiveModel;
use crate::resampling::ResamplePlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: i64,
    pub rows_excluded: usize,
    /// Reason the group was skipped, if it was.
    pub skipped: Option<String>,
    pub theta_bar: Vec<f64>,
    /// `θ̄₋g − θ̄`.
    pub delta: Vec<f64>,
    /// `delta` in units of the full-sample standard errors.
    pub delta_in_se: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SensitivityResult {
    pub baseline: InferenceReport,
    pub baseline_trace: DMatrix<f64>,
    pub groups: Vec<GroupSummary>,
    /// Retained draws per evaluated group.
    pub traces: Vec<(i64, DMatrix<f64>)>,
}

/// Reruns the chain once per group with resampling plans that never draw
/// the group's rows. Every run uses the same random stream as the baseline.
pub fn leave_group_out<M: ObjectiveModel + ?Sized>(
    model: &M,
    chain: &ChainConfig,
    labels: &[i64],
    groups: Option<&[i64]>,
    min_rows: usize,
    alpha: f64,
) -> Result<SensitivityResult> {
    if labels.len() != model.n_obs() {
        return Err(Error::Config(format!("{} group labels for {} observations", labels.len(), model.n_obs())));
    }
    let distinct: BTreeSet<i64> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config("sensitivity analysis needs at least two groups".into()));
    }
    let base = chains::run_resampled_chain(model, chain)?;
    let baseline = inference::summarize(&base, alpha)?;
    let groups: Vec<i64> = groups.map_or_else(|| distinct.iter().copied().collect(), <[i64]>::to_vec);
    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    for g in groups {
        let rows: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| **l == g).map(|(i, _)| i).collect();
        let skip = |reason: String| {
            log::warn!("group {g}: {reason}; skipped");
            GroupSummary {
                group: g,
                rows_excluded: rows.len(),
                skipped: Some(reason),
                theta_bar: vec![],
                delta: vec![],
                delta_in_se: vec![],
            }
        };
        if model.n_obs() - rows.len() < min_rows {
            summaries.push(skip(format!("only {} rows would remain", model.n_obs() - rows.len())));
            continue;
        }
        let plan = match chain.plan.excluding(&rows) {
            Ok(p) => p,
            Err(e) => {
                summaries.push(skip(e.to_string()));
                continue;
            }
        };
        let mut cfg = chain.clone();
        cfg.plan = plan;
        let history = match chains::run_resampled_chain(model, &cfg) {
            Ok(h) => h,
            Err(e) if e.is_numerical() => {
                summaries.push(skip(e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let theta_bar = linalg::column_means(&history.draws);
        let delta: Vec<f64> = (0..theta_bar.len()).map(|j| theta_bar[j] - baseline.theta_bar[j]).collect();
        summaries.push(GroupSummary {
            group: g,
            rows_excluded: rows.len(),
            skipped: None,
            delta_in_se: delta.iter().zip(&baseline.se).map(|(d, s)| d / s).collect(),
            delta,
            theta_bar: theta_bar.iter().copied().collect(),
        });
        traces.push((g, history.draws));
    }
    Ok(SensitivityResult {
        baseline,
        baseline_trace: base.draws,
        groups: summaries,
        traces,
    })
}

/// Loads the configured data with `group_column` as the group labels and
/// writes `sensitivity.csv` and `sensitivity_traces.csv`.
pub fn cmd_sensitivity(cfg: &ExperimentConfig, group_column: Option<&str>) -> Result<(SensitivityResult, Vec<PathBuf>)> {
    cfg.validate()?;
    let column = group_column
        .map(str::to_string)
        .or_else(|| cfg.sensitivity.group.clone())
        .ok_or_else(|| Error::Config("sensitivity needs a group column (sensitivity.group or --group)".into()))?;
    if cfg.model.file.is_none() || cfg.model.kind.is_simulated() || cfg.model.kind == ModelKind::Ma1 {
        return Err(Error::Config("sensitivity runs on cross-section data files (ols or probit)".into()));
    }
    let mut spec = cfg.model.clone();
    spec.cluster = Some(column.clone());
    spec.dgp = None;
    let prepared = dgp::prepare(&spec, &mut replication_stream(cfg.seed, 0).derive(DATA_LABEL).rng())?;
    let labels = prepared.clusters.clone().expect("group column was loaded");
    let n = prepared.sample.n();
    let m = cfg.chain.m.unwrap_or(n);
    let plan = match cfg.chain.resampling {
        None | Some(ResamplingKind::Iid) => ResamplePlan::iid(n, m)?,
        Some(ResamplingKind::Exponential) => ResamplePlan::exponential(n)?,
        Some(other) => return Err(Error::Config(format!("sensitivity supports iid or exponential resampling, not {other:?}"))),
    };
    let gamma = cfg.chain.gammas.first().copied().unwrap_or(0.1);
    let stream = replication_stream(cfg.seed, 0).derive(label_id("sensitivity"));
    let run = |model: &dyn ObjectiveModel| -> Result<SensitivityResult> {
        let start = match &cfg.chain.theta0 {
            Some(t) => DVector::from_column_slice(t),
            None => chains::classical_newton(model, &DVector::zeros(model.dim()), 1.0, 200, 1e-10)?.theta,
        };
        let mut chain = ChainConfig::new(gamma, cfg.chain.draws, start, plan.clone(), stream).with_conditioning(Conditioning {
            kind: ExperimentConfig::conditioning_for(super::config::Method::Rnr),
            pd_repair_c: cfg.chain.pd_repair_c,
        });
        chain = chain.with_rejection_factor(cfg.chain.rejection_factor);
        if let Some(b) = cfg.chain.burn {
            chain = chain.with_burn(b);
        }
        leave_group_out(model, &chain, &labels, cfg.sensitivity.groups.as_deref(), cfg.sensitivity.min_rows, cfg.alpha)
    };
    let result = match &prepared.sample {
        Sample::Ols(m) => run(m)?,
        Sample::Probit(m) => run(m)?,
        _ => unreachable!("checked above"),
    };

    std::fs::create_dir_all(&cfg.output)?;
    let names = &prepared.names;
    let summary_path = cfg.output.join("sensitivity.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["group", "rows_excluded", "coordinate", "estimate", "delta", "delta_in_se", "gamma", "m", "B", "seed", "status"])?;
    for g in &result.groups {
        match &g.skipped {
            Some(reason) => {
                w.write_record([
                    g.group.to_string(),
                    g.rows_excluded.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    gamma.to_string(),
                    m.to_string(),
                    cfg.chain.draws.to_string(),
                    cfg.seed.to_string(),
                    format!("skipped: {reason}"),
                ])?;
            }
            None => {
                for (j, name) in names.iter().enumerate() {
                    w.write_record([
                        g.group.to_string(),
                        g.rows_excluded.to_string(),
                        name.clone(),
                        format!("{:.6}", g.theta_bar[j]),
                        format!("{:.6}", g.delta[j]),
                        format!("{:.4}", g.delta_in_se[j]),
                        gamma.to_string(),
                        m.to_string(),
                        cfg.chain.draws.to_string(),
                        cfg.seed.to_string(),
                        "ok".into(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;

    let trace_path = cfg.output.join("sensitivity_traces.csv");
    let mut w = csv::Writer::from_path(&trace_path)?;
    let mut header = vec!["excluded_group".to_string(), "iter".to_string()];
    header.extend((1..=names.len()).map(|j| format!("theta_{j}")));
    w.write_record(&header)?;
    let all = std::iter::once((None, &result.baseline_trace)).chain(result.traces.iter().map(|(g, t)| (Some(*g), t)));
    for (g, trace) in all {
        for i in 0..trace.nrows() {
            let mut rec = vec![g.map(|g| g.to_string()).unwrap_or_else(|| "none".into()), i.to_string()];
            rec.extend(trace.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok((result, vec![summary_path, trace_path]))
}
