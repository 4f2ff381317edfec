//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token index {index} out of range for codebook of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
