use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension too small: {needed} orthonormal directions requested but d = {d}")]
    DimensionTooSmall { needed: usize, d: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task index {task} out of range for {num_tasks} tasks")]
    TaskOutOfRange { task: usize, num_tasks: usize },

    #[error("degenerate norm {norm:e}: layer normalization of the attention output is undefined")]
    DegenerateNorm { norm: f64 },

    #[error("training diverged: non-finite {what}")]
    Diverged { what: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("sample {sample}: {source}")]
    InSample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config schema: {0}")]
    Schema(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("flow parameters violate `{condition}`")]
    FlowConstraint { condition: String },

    #[error("insufficient log: {0}")]
    InsufficientLog(String),

    #[error("infeasible dictionary shift: {0}")]
    InfeasibleShift(String),

    #[error("malformed metrics csv: {0}")]
    MalformedCsv(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn in_sample(self, sample: usize) -> Self {
        Error::InSample {
            sample,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        Error::AtEpoch {
            epoch,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping epoch/sample context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InSample { source, .. } | Error::AtEpoch { source, .. } => source.root(),
            other => other,
        }
    }
}
