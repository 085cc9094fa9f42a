use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StetError>;

#[derive(Debug, Error)]
pub enum StetError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("softmax slice {row} has no finite entry (no valid key in window)")]
    DegenerateSlice { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value encountered in {path}")]
    NumericInstability { path: String },

    #[error("channel {channel} is constant (min == max == {value})")]
    DegenerateChannel { channel: usize, value: f64 },

    #[error("value {value} outside [-1, 1] at row {row}, channel {channel}")]
    Range { value: f64, row: usize, channel: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("mask has no masked entries")]
    DegenerateMask,

    #[error("unknown class id {0} in category map")]
    Mapping(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("division by zero: {0}")]
    Division(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StetError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        StetError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
