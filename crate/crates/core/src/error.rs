use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition (shapes, divisibility, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("schema error in {path}: field `{field}`: {reason}")]
    Schema {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("export to {path} failed: {reason}")]
    Export { path: PathBuf, reason: String },

    #[error(
        "non-finite loss at iteration {iteration} (lr {learning_rate:e}, batch {batch_ids:?})"
    )]
    NonFiniteLoss {
        iteration: u64,
        learning_rate: f64,
        batch_ids: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn schema(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Schema {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn export(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Export {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
