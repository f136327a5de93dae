//! Draws files: `iter, theta_1..theta_d, batch_stream_id` plus a JSON sidecar.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::run::Trace;
use crate::chains::ChainEcho;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub label: String,
    pub method: Method,
    pub names: Vec<String>,
    /// Leading rows that are burn-in.
    pub burn: usize,
    pub gamma: f64,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub rejections: usize,
    /// Chain settings needed to replay the batches.
    pub echo: Option<ChainEcho>,
    pub theta_hat: Option<Vec<f64>>,
    /// The experiment that produced the draws (replication 0 of its seed).
    pub config: Option<ExperimentConfig>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_draws(path: &Path, trace: &Trace, meta: &DrawsMeta) -> Result<()> {
    let d = trace.rows.ncols();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string()];
    header.extend((1..=d).map(|j| format!("theta_{j}")));
    header.push("batch_stream_id".into());
    w.write_record(&header)?;
    for i in 0..trace.rows.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(trace.rows.row(i).iter().map(|v| v.to_string()));
        rec.push(trace.batch_ids[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

/// Draws as read back: all rows in file order, their batch ids, and the
/// sidecar when one exists.
#[derive(Clone, Debug)]
pub struct DrawsFile {
    pub rows: DMatrix<f64>,
    pub batch_ids: Vec<u64>,
    pub meta: Option<DrawsMeta>,
}

pub fn read_draws(path: &Path) -> Result<DrawsFile> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let here = |line: u64| format!("{}:{line}", path.display());
    if header.len() < 3 || header[0] != "iter" || header[header.len() - 1] != "batch_stream_id" {
        return Err(Error::Parse {
            location: here(1),
            reason: "expected header 'iter, theta_1..theta_d, batch_stream_id'".into(),
        });
    }
    let d = header.len() - 2;
    for (j, name) in header[1..=d].iter().enumerate() {
        if *name != format!("theta_{}", j + 1) {
            return Err(Error::Parse {
                location: here(1),
                reason: format!("column {} should be theta_{}, found '{name}'", j + 2, j + 1),
            });
        }
    }
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            location: here(i as u64 + 2),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 2, |p| p.line());
        if rec.len() != d + 2 {
            return Err(Error::Parse {
                location: here(line),
                reason: format!("expected {} fields, found {}", d + 2, rec.len()),
            });
        }
        for j in 1..=d {
            let v: f64 = rec[j].trim().parse().map_err(|_| Error::Parse {
                location: format!("{} column {}", here(line), header[j]),
                reason: format!("'{}' is not a number", &rec[j]),
            })?;
            values.push(v);
        }
        let id: u64 = rec[d + 1].trim().parse().map_err(|_| Error::Parse {
            location: format!("{} column batch_stream_id", here(line)),
            reason: format!("'{}' is not a stream index", &rec[d + 1]),
        })?;
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::Parse {
            location: here(2),
            reason: "no draws".into(),
        });
    }
    let meta = match std::fs::read_to_string(sidecar_path(path)) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", sidecar_path(path).display(), e.line(), e.column()),
            reason: e.to_string(),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    Ok(DrawsFile {
        rows: DMatrix::from_row_slice(ids.len(), d, &values),
        batch_ids: ids,
        meta,
    })
}
