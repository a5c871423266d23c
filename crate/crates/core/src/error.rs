use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IgclError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape { context: &'static str, expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing parse map for image {image}: expected {expected}")]
    MissingParseMap { image: PathBuf, expected: PathBuf },

    #[error("parse map {path} contains class index {value}, valid range is 0..=17")]
    InvalidClassIndex { path: PathBuf, value: u8 },

    #[error("malformed dataset file name {0}: expected <identity>_<camera>_<clothing>_<index>.png")]
    BadFileName(PathBuf),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IgclError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> IgclError {
    let path = path.into();
    move |source| IgclError::Io { path, source }
}

pub(crate) fn shape_err(context: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> IgclError {
    IgclError::Shape { context, expected: format!("{expected:?}"), actual: format!("{actual:?}") }
}
