use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid input to {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite objective value at {coordinate}")]
    Evaluation { coordinate: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("load error at row {row}, column {column}: {detail}")]
    Load { row: usize, column: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty table: {0}")]
    EmptyTable(String),

    #[error("split too short: {split} has {rows} rows, needs at least {required}")]
    Sizing { split: &'static str, rows: usize, required: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("insufficient samples: got {got}, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidInput { .. } => "invalid_input",
            Error::Contract(_) => "contract",
            Error::Evaluation { .. } => "evaluation",
            Error::Config(_) => "config",
            Error::Load { .. } => "load",
            Error::Format(_) => "format",
            Error::EmptyTable(_) => "empty_table",
            Error::Sizing { .. } => "sizing",
            Error::Integrity(_) => "integrity",
            Error::Version { .. } => "version",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
