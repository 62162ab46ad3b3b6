use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix `{0}` is not symmetric")]
    NotSymmetric(String),

    #[error("expression matrix must be sphere-normalized (unit-norm rows) for this operation")]
    NotSphereNormalized,

    #[error("non-finite loss or gradient at epoch {epoch}")]
    FitDiverged { epoch: usize },

    #[error("spot {spot} has no free entries left to restore a unit norm")]
    CannotProject { spot: String },

    #[error("freeze mask is infeasible at spot {spot}: frozen entries have norm {norm} > 1")]
    InfeasibleMask { spot: String, norm: f64 },

    #[error("gene not found: {0}")]
    GeneNotFound(String),

    #[error("spot not found: {0}")]
    SpotNotFound(String),

    #[error("{0}")]
    EmptyGroup(String),

    #[error("statistic undefined: {0}")]
    Degenerate(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: u64,
        message: String,
    },

    #[error("duplicate {kind} id `{id}` in {path}")]
    DuplicateId {
        kind: &'static str,
        id: String,
        path: PathBuf,
    },

    #[error("spot `{spot}` is {problem}")]
    IdMismatch { spot: String, problem: String },

    #[error("all genes were removed by the detection filter")]
    AllGenesFiltered,

    #[error("spot `{0}` has zero total expression and cannot be projected to the unit sphere")]
    ZeroRow(String),

    #[error("gene names differ between `{first}` and `{second}`")]
    GeneMismatch { first: String, second: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
