use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The objective produced a non-finite value or hit a hard numerical limit.
    #[error("evaluation failed at theta = {theta:?}{}: {reason}", observation.map(|i| format!(" (observation {i})")).unwrap_or_default())]
    Evaluation {
        theta: Vec<f64>,
        observation: Option<usize>,
        reason: String,
    },

    #[error("model construction failed: {0}")]
    Model(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model does not support {0}")]
    Capability(&'static str),

    #[error("conditioning matrix is singular after repair (spectrum {spectrum:?})")]
    Conditioning { spectrum: Vec<f64> },

    #[error("variance matrix is singular (spectrum {spectrum:?})")]
    SingularVariance { spectrum: Vec<f64> },

    #[error(
        "chain diverged at iteration {iteration}: {rejections} of the last {window} draws were rejected; \
         try a smaller learning rate"
    )]
    Divergence {
        iteration: usize,
        rejections: usize,
        window: usize,
    },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} replications failed (limit {limit})")]
    Replications {
        failed: usize,
        total: usize,
        limit: usize,
    },

    #[error("malformed input at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn evaluation(theta: &nalgebra::DVector<f64>, observation: Option<usize>, reason: impl Into<String>) -> Self {
        Error::Evaluation {
            theta: theta.iter().copied().collect(),
            observation,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::AtIteration { .. } | e @ Error::Divergence { .. } => e,
            e => Error::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }

    /// True for failures caused by numerics rather than configuration or IO.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Evaluation { .. }
            | Error::Conditioning { .. }
            | Error::SingularVariance { .. }
            | Error::Divergence { .. }
            | Error::Replications { .. } => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
