use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    /// Invalid configuration or layer wiring. The message names the offending key or layer.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by layer `{layer}`")]
    Numeric { layer: String },

    #[error("stale tape: recorded for weight version {recorded}, stack is at version {current}")]
    StaleTape { recorded: u64, current: u64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: f64, classes: usize },

    #[error("weight blob: {0}")]
    Format(String),

    #[error("infeasible partition: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl FedError {
    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        FedError::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            FedError::Config(_)
            | FedError::Shape { .. }
            | FedError::Infeasible(_)
            | FedError::Csv { .. }
            | FedError::LabelOutOfRange { .. } => 2,
            FedError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
