use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QsgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QsgError {
    #[error("invalid instance size: {0}")]
    InvalidSize(String),

    #[error("center index {index} out of range for {n_centers} centers")]
    InvalidIndex { index: usize, n_centers: usize },

    #[error("invalid instance: {0}")]
    Validation(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("strategy has no operated centers")]
    EmptyStrategy,

    /// The y-transform `y = exp(-lambda w^a x)` is constant for this center.
    #[error("coverage transform is degenerate for center {center} (lambda * w^a = 0)")]
    DegenerateTransform { center: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("instance with {n} centers exceeds the limit of {max} for {what}; {hint}")]
    SizeLimit {
        n: usize,
        max: usize,
        what: &'static str,
        hint: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("external solver timed out after {seconds:.1} s; log tail: {log}")]
    Timeout { seconds: f64, log: String },

    #[error("model is infeasible: {0}")]
    Infeasible(String),

    #[error("solver output rejected: {0}")]
    SolverOutput(String),

    #[error("{context}: {source}")]
    Bisection {
        context: String,
        #[source]
        source: Box<QsgError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl QsgError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        QsgError::Domain(msg.into())
    }

    /// Strips bisection wrappers to reach the original failure.
    pub fn root_cause(&self) -> &QsgError {
        match self {
            QsgError::Bisection { source, .. } => source.root_cause(),
            other => other,
        }
    }
}
