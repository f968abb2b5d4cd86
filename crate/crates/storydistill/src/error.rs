//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: user errors
//! (bad input, bad config) exit 1, backend errors exit 2, internal invariant
//! violations exit 3.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    #[error("backend returned a malformed payload: {0}")]
    Protocol(String),

    #[error("generation failed: {message}; last output: {last_output:?}")]
    Generation {
        message: String,
        last_output: Option<String>,
    },

    #[error("missing upstream artifact {artifact}: run the `{producing_stage}` stage first")]
    MissingArtifact {
        artifact: String,
        producing_stage: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite loss at step {step} (examples {examples:?})")]
    NonFiniteLoss { step: u64, examples: Vec<String> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 1 user error, 2 backend error, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::Record { .. }
            | Error::MissingArtifact { .. } => 1,
            Error::Backend { .. } | Error::Protocol(_) | Error::Generation { .. } => 2,
            Error::Invariant(_) | Error::NonFiniteLoss { .. } => 3,
        }
    }
}
