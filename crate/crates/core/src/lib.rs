//! Resampled Newton-Raphson chains for extremum estimators: one run gives a
//! point estimate (the mean of the draws) and bootstrap-valid standard
//! errors (their rescaled covariance).

pub mod baselines;
pub mod chains;
pub mod conditioning;
pub mod error;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod models;
pub mod numdiff;
pub mod resampling;
pub mod smd;

pub use error::{Error, Result};
