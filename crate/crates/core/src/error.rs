use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed scan {path}: {len} bytes is not a multiple of 16")]
    MalformedScan { path: PathBuf, len: u64 },

    #[error("malformed label file {path}: {len} bytes is not a multiple of 4")]
    MalformedLabels { path: PathBuf, len: u64 },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("label count {labels} does not match point count {points}")]
    LabelMismatch { labels: usize, points: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("frame index {got} is not after previous frame {prev}")]
    NonMonotoneFrame { prev: u64, got: u64 },

    #[error("insufficient frames: need {need}, have {have}")]
    InsufficientFrames { need: usize, have: usize },

    #[error("probabilities not normalized: column {column} sums to {sum}")]
    NotNormalized { column: usize, sum: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bad tensor container: {0}")]
    Container(String),

    #[error("training diverged at epoch {epoch} step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("scene error: {0}")]
    Scene(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}
