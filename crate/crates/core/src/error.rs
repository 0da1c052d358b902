use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed roles file: {0}")]
    Roles(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing header row")]
    MissingHeader,

    #[error("missing value in column `{column}` at record {record}")]
    MissingCell { column: String, record: usize },

    #[error("unassigned attribute `{0}`")]
    UnassignedAttribute(String),

    #[error("attribute `{0}` assigned to more than one role")]
    DoublyAssigned(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("label `{name}` has domain size {size}; at least 2 required")]
    DegenerateLabel { name: String, size: usize },

    #[error("overlapping arguments: {0}")]
    Overlap(String),

    #[error("joint configuration space of {0:?} does not fit in 64 bits")]
    IndexOverflow(Vec<String>),

    #[error("insufficient data: every conditioning stratum has fewer than {min_count} records")]
    InsufficientData { min_count: usize },

    #[error("cannot partition: {0}")]
    Partition(String),

    #[error("latent state count {tau} violates the identifiability bound: need tau = 1 or 2 <= tau <= min(|left|, |right|) = {bound}")]
    TauBound { tau: usize, bound: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined ROD: no admissible stratum contains two sensitive groups")]
    UndefinedRod,

    #[error("invalid DAG specification: {0}")]
    Spec(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
