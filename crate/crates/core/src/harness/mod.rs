//! Experiment runner: configuration, synthetic designs, fits, coverage
//! studies, leave-one-group-out sensitivity and draw diagnostics.

pub mod config;
pub mod coverage;
pub mod dgp;
pub mod diagnose;
pub mod draws;
pub mod fit;
pub mod run;
pub mod sensitivity;

pub use config::{ExperimentConfig, Method, ModelKind};
pub use coverage::{cmd_coverage, run_coverage, CoverageResult, CoverageRow};
pub use diagnose::{cmd_diagnose, diagnose_draws, DiagnosticsReport};
pub use fit::{cmd_fit, FitOutput, Status};
pub use sensitivity::{cmd_sensitivity, leave_group_out, SensitivityResult};
