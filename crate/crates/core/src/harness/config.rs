//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Classical,
    Rnr,
    Rgd,
    Rqn,
    Mofn,
    Dmk,
    Ks,
    Smd,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Classical => "classical",
            Method::Rnr => "rnr",
            Method::Rgd => "rgd",
            Method::Rqn => "rqn",
            Method::Mofn => "mofn",
            Method::Dmk => "dmk",
            Method::Ks => "ks",
            Method::Smd => "smd",
        }
    }

    /// Methods that run one chain per learning rate.
    pub fn is_chain(self) -> bool {
        matches!(self, Method::Rnr | Method::Rgd | Method::Rqn | Method::Smd)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "classical" => Method::Classical,
            "rnr" => Method::Rnr,
            "rgd" => Method::Rgd,
            "rqn" => Method::Rqn,
            "mofn" => Method::Mofn,
            "dmk" => Method::Dmk,
            "ks" => Method::Ks,
            "smd" => Method::Smd,
            other => return Err(Error::Config(format!("unknown method '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ols,
    Probit,
    Ma1,
    /// Dynamic panel estimated by simulated method of moments.
    Panel,
    /// Sample mean estimated by simulated method of moments.
    Mean,
}

impl ModelKind {
    pub fn is_simulated(self) -> bool {
        matches!(self, ModelKind::Panel | ModelKind::Mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingKind {
    Iid,
    MovingBlock,
    BlockResampled,
    Cluster,
    Exponential,
}

/// Synthetic data settings; unset fields take the model's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpParams {
    pub n: Option<usize>,
    pub theta: Option<Vec<f64>>,
    /// Panel length.
    pub periods: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dgp: Option<DgpParams>,
    pub file: Option<PathBuf>,
    pub response: Option<String>,
    #[serde(default)]
    pub regressors: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
    /// Integer column with cluster labels.
    pub cluster: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Batch size; unset means `m = n`.
    pub m: Option<usize>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    pub burn: Option<usize>,
    pub theta0: Option<Vec<f64>>,
    pub resampling: Option<ResamplingKind>,
    #[serde(default = "default_rejection")]
    pub rejection_factor: f64,
    #[serde(default = "one")]
    pub hessian_every_k: usize,
    pub pd_repair_c: Option<f64>,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            gammas: default_gammas(),
            m: None,
            draws: default_draws(),
            burn: None,
            theta0: None,
            resampling: None,
            rejection_factor: default_rejection(),
            hessian_every_k: 1,
            pd_repair_c: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapParams {
    #[serde(default = "default_draws")]
    pub replications: usize,
    /// Newton steps per replication for the k-step bootstrap.
    #[serde(default = "one")]
    pub k: usize,
    /// Batch size; unset means the chain's `m`.
    pub m: Option<usize>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        Self {
            replications: default_draws(),
            k: 1,
            m: None,
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmdParams {
    /// Simulated samples per evaluation (`S`).
    #[serde(default = "one")]
    pub simulations: usize,
}

impl Default for SmdParams {
    fn default() -> Self {
        Self { simulations: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityParams {
    /// Column whose groups are left out one at a time.
    pub group: Option<String>,
    /// Groups to leave out; unset means every label in the column.
    pub groups: Option<Vec<i64>>,
    /// Rows that must remain after an exclusion.
    #[serde(default = "default_min_rows")]
    pub min_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub methods: Vec<Method>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Monte Carlo replications for coverage studies.
    #[serde(default = "one")]
    pub replications: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub chain: ChainParams,
    #[serde(default)]
    pub bootstrap: BootstrapParams,
    #[serde(default)]
    pub smd: SmdParams,
    #[serde(default)]
    pub sensitivity: SensitivityParams,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_gammas() -> Vec<f64> {
    vec![0.1, 0.3, 1.0]
}
fn default_draws() -> usize {
    1000
}
fn default_rejection() -> f64 {
    6.0
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-10
}
fn default_min_rows() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.05
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

/// Line of the first `key = …` assignment, optionally inside `[table]`.
fn key_line(text: &str, table: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = Some(line.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        let in_table = match table {
            None => current.is_none(),
            Some(t) => current.as_deref() == Some(t),
        };
        if in_table && line.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

struct Problem {
    table: Option<&'static str>,
    key: &'static str,
    reason: String,
}

fn problem(table: Option<&'static str>, key: &'static str, reason: impl Into<String>) -> Problem {
    Problem {
        table,
        key,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. `origin` names it in errors.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("{origin}:{line}:{col}")
                }
                None => origin.to_string(),
            };
            Error::Parse {
                location,
                reason: e.message().to_string(),
            }
        })?;
        if let Err(p) = cfg.check() {
            let location = match key_line(text, p.table, p.key) {
                Some(line) => format!("{origin}:{line}"),
                None => origin.to_string(),
            };
            let name = match p.table {
                Some(t) => format!("{t}.{}", p.key),
                None => p.key.to_string(),
            };
            return Err(Error::Parse {
                location,
                reason: format!("{name}: {}", p.reason),
            });
        }
        Ok(cfg)
    }

    /// Reads a config file; a relative data path is resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        if let (Some(file), Some(dir)) = (&cfg.model.file, path.parent()) {
            if file.is_relative() {
                cfg.model.file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    /// Validation for configs assembled in code.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|p| match p.table {
            Some(t) => Error::Config(format!("{t}.{}: {}", p.key, p.reason)),
            None => Error::Config(format!("{}: {}", p.key, p.reason)),
        })
    }

    fn check(&self) -> std::result::Result<(), Problem> {
        if self.methods.is_empty() {
            return Err(problem(None, "methods", "at least one method is required"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(problem(None, "methods", "methods are listed more than once"));
        }
        if self.replications == 0 {
            return Err(problem(None, "replications", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(problem(None, "alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        let model = &self.model;
        match (&model.dgp, &model.file) {
            (Some(_), Some(_)) => return Err(problem(Some("model"), "file", "give either a data file or a dgp table, not both")),
            (None, None) => return Err(problem(Some("model"), "kind", "a data file or a dgp table is required")),
            (None, Some(_)) if model.kind.is_simulated() => {
                return Err(problem(Some("model"), "file", "simulation-based models run on synthetic data only"))
            }
            (None, Some(_)) if model.response.is_none() => return Err(problem(Some("model"), "response", "a response column is required with a data file")),
            _ => {}
        }
        if let Some(dgp) = &model.dgp {
            if dgp.n == Some(0) {
                return Err(problem(Some("model.dgp"), "n", "must be positive"));
            }
            if let Some(theta) = &dgp.theta {
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(problem(Some("model.dgp"), "theta", "must be finite"));
                }
            }
            if model.kind == ModelKind::Panel && dgp.periods.is_some_and(|t| t < 3) {
                return Err(problem(Some("model.dgp"), "periods", "need at least 3 periods"));
            }
        }
        for &m in &self.methods {
            let ok = match m {
                Method::Classical | Method::Mofn => true,
                Method::Smd => model.kind.is_simulated(),
                Method::Rnr | Method::Rgd | Method::Rqn | Method::Dmk | Method::Ks => !model.kind.is_simulated(),
            };
            if !ok {
                return Err(problem(None, "methods", format!("method '{}' does not apply to model kind {:?}", m.tag(), model.kind)));
            }
        }
        let chain = &self.chain;
        if self.methods.iter().any(|m| m.is_chain()) {
            if chain.gammas.is_empty() {
                return Err(problem(Some("chain"), "gammas", "at least one learning rate is required"));
            }
            if let Some(g) = chain.gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
                return Err(problem(Some("chain"), "gammas", format!("learning rates must lie in (0, 1], got {g}")));
            }
            if chain.draws < 2 {
                return Err(problem(Some("chain"), "draws", "need at least 2 draws"));
            }
        }
        if chain.m == Some(0) {
            return Err(problem(Some("chain"), "m", "must be positive"));
        }
        if !(chain.rejection_factor > 1.0) {
            return Err(problem(Some("chain"), "rejection_factor", "must exceed 1"));
        }
        if chain.hessian_every_k == 0 {
            return Err(problem(Some("chain"), "hessian_every_k", "must be at least 1"));
        }
        if chain.resampling == Some(ResamplingKind::Cluster) && model.cluster.is_none() && model.kind != ModelKind::Panel {
            return Err(problem(Some("chain"), "resampling", "cluster resampling needs model.cluster"));
        }
        let boot = &self.bootstrap;
        if self.methods.iter().any(|m| matches!(m, Method::Mofn | Method::Dmk | Method::Ks)) && boot.replications < 2 {
            return Err(problem(Some("bootstrap"), "replications", "need at least 2 replications"));
        }
        if boot.k == 0 {
            return Err(problem(Some("bootstrap"), "k", "must be at least 1"));
        }
        if boot.m == Some(0) {
            return Err(problem(Some("bootstrap"), "m", "must be positive"));
        }
        if !(boot.tol > 0.0) || boot.max_iter == 0 {
            return Err(problem(Some("bootstrap"), "tol", "tolerance and iteration limit must be positive"));
        }
        if self.smd.simulations == 0 {
            return Err(problem(Some("smd"), "simulations", "must be at least 1"));
        }
        Ok(())
    }

    pub fn conditioning_for(method: Method) -> ConditioningKind {
        match method {
            Method::Rgd => ConditioningKind::Identity,
            Method::Rqn => ConditioningKind::BfgsApprox,
            _ => ConditioningKind::InverseHessian,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
