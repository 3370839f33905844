use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("degenerate illuminant {0:?}")]
    DegenerateIlluminant([f64; 3]),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("missing parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("stage chain broken: {0}")]
    StageOrder(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: u64,
        last_good: Box<Checkpoint>,
    },
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end: 2 for data problems,
    /// 3 for numeric failures, 1 for usage and configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::StageOrder(_) => 1,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Data(_)
            | Error::MissingParameters(_)
            | Error::Shape { .. } => 2,
            Error::NonFinite { .. } | Error::DegenerateIlluminant(_) | Error::NonFiniteLoss { .. } => 3,
        }
    }
}
