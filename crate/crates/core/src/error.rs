use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the odometry pipeline.
#[derive(Debug, Error)]
pub enum VloError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("trajectory too short: total length {total_length:.3} m, usable lengths {usable:?}")]
    TrajectoryTooShort { total_length: f64, usable: Vec<f64> },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VloError>;

pub(crate) fn shape_err(
    context: impl Into<String>,
    expected: impl ToString,
    actual: impl ToString,
) -> VloError {
    VloError::Shape {
        context: context.into(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
