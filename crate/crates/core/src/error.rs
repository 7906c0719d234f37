use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. Variant names follow the stage that
/// raised them so callers can map them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("normalize error: {0}")]
    Normalize(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("degrade error: {0}")]
    Degrade(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("train error: {0}")]
    Train(String),

    #[error("divergence at epoch {epoch}, step {step}: {what} is not finite")]
    Divergence {
        epoch: usize,
        step: u64,
        what: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("fuse error: {0}")]
    Fuse(String),

    #[error("evaluation of method `{method}` failed: {reason}")]
    Eval { method: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that stem from invalid input or configuration, as
    /// opposed to failures that happen while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Plan(_) | Error::Split(_) | Error::Shape(_)
        )
    }
}
