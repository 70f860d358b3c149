use std::path::PathBuf;

use thiserror::Error;

use crate::moments::MomentModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("ingestion error in {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("coarse cells with zero fine-cell overlap: {0:?}")]
    EmptyOverlap(Vec<i64>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("moment model did not converge after {iterations} iterations (log-likelihood {log_likelihood}, gradient norm {grad_norm})")]
    NotConverged {
        iterations: usize,
        log_likelihood: f64,
        grad_norm: f64,
        best: Box<MomentModel>,
    },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("no ARMA candidate converged for orders up to ({max_p}, {max_q})")]
    ArmaAllFailed { max_p: usize, max_q: usize },

    #[error("variogram fit failed: {0}")]
    VariogramFit(String),

    #[error("Cholesky factorization failed with jitter up to {max_jitter:e}")]
    Factorization { max_jitter: f64 },

    #[error("fine cell {0} does not intersect any coarse cell")]
    Unmapped(i64),

    #[error("non-finite variance ratio at coarse cell {cell}, day index {day}")]
    NonFiniteRatio { cell: i64, day: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run {stage} first")]
    MissingArtifact { stage: &'static str, path: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (bad config, files, ordering of
    /// stages) rather than a numerical failure inside the library.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::Json { .. }
                | Error::Ingest { .. }
                | Error::Grid(_)
                | Error::Dimension(_)
                | Error::EmptyOverlap(_)
                | Error::InvalidInput(_)
                | Error::Config(_)
                | Error::MissingArtifact { .. }
                | Error::Unmapped(_)
        )
    }
}
