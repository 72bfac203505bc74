use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelHandle;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite value in loss term `{term}`")]
    Numeric { term: &'static str },

    #[error("model has no `{0}` branch (stripped or disabled)")]
    MissingBranch(&'static str),

    /// Training hit a non-finite loss. Carries the last parameters that
    /// produced a finite step.
    #[error("training diverged at step {step}: non-finite `{term}`")]
    Diverged {
        step: usize,
        term: &'static str,
        last_good: Box<ModelHandle>,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
