use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("not a probability vector: {0}")]
    NotOnSimplex(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of bounds for length {len}")]
    OutOfBounds { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("degenerate reliabilities: sum of weights is {sum}")]
    DegenerateReliabilities { sum: f64 },

    #[error("loss became NaN at epoch {epoch} (psi = {psi:?})")]
    NanLoss { epoch: usize, psi: Vec<f64> },

    #[error("truth discovery failed on {} sample(s); first: sample {}: {}", .0.len(), .0[0].0, .0[0].1)]
    SampleFailures(Vec<(usize, CalError)>),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{}: unsupported schema version {found} (expected {expected})", path.display())]
    SchemaVersion { path: PathBuf, found: u64, expected: u64 },

    #[error("row count mismatch: {} has {first_rows} rows but {} has {other_rows}", first.display(), other.display())]
    RowMismatch { first: PathBuf, first_rows: usize, other: PathBuf, other_rows: usize },
}

impl CalError {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            CalError::DegenerateReliabilities { .. } | CalError::NanLoss { .. } => true,
            CalError::SampleFailures(fails) => fails.iter().any(|(_, e)| e.is_numerical()),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalError::Io { path: path.into(), source }
    }
}
