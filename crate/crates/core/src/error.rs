use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A histogram tile with no mass; callers fall back to the configured floor.
    #[error("degenerate tile histogram")]
    DegenerateTile,

    #[error("{what}: {count} exceeds the exact-enumeration cap of {cap}")]
    OverLimit {
        what: &'static str,
        count: usize,
        cap: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed {what} at line {line}, column {column}: {message}")]
    Parse {
        what: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("stage `{stage}` failed on `{input}`: {source}")]
    Stage {
        stage: &'static str,
        input: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps an error with the pipeline stage and input that produced it.
    pub fn in_stage(self, stage: &'static str, input: impl Into<String>) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                input: input.into(),
                source: Box::new(other),
            },
        }
    }

    /// True for errors caused by bad user input rather than a failing stage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Format { .. }
                | Error::Json(_)
        )
    }
}
