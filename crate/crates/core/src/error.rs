use std::path::PathBuf;

use crate::engine::Step;

/// Errors raised while configuring or running the sampler.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid count matrix: {0}")]
    InvalidCounts(String),

    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "offset estimation failed: no gene has positive counts in every sample; \
         supply per-sample offsets explicitly"
    )]
    Normalization,

    #[error("invalid contrast `{id}`: {reason}")]
    Contrast { id: String, reason: String },

    #[error("{path}: row {row}, column {column}: {reason}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },

    #[error("slice sampler stalled in {step:?} at {site}: {source}")]
    Stall {
        step: Step,
        site: String,
        #[source]
        source: SliceError,
    },

    #[error("simulation rejected: {0}")]
    Simulation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures that happen while sampling rather than while validating input.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Stall { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
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
}

/// Failures of a single slice-sampling update.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SliceError {
    #[error("log density is -inf or NaN at the starting point x0 = {x0}")]
    InvalidStart { x0: f64 },

    #[error("shrinkage did not accept within {shrinks} proposals (x0 = {x0}, w = {w}, iteration {iteration})")]
    Stall {
        x0: f64,
        w: f64,
        iteration: u64,
        shrinks: usize,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
