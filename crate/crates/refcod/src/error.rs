//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing directory: {0}")]
    MissingDirectory(String),
    #[error("category '{category}' has no referring images in split '{split}'")]
    EmptyCategory { category: String, split: String },
    #[error("requested {requested} references but category '{category}' only has {available}")]
    InsufficientReferences {
        category: String,
        requested: usize,
        available: usize,
    },
    #[error("write failure at {path}: {source}")]
    WriteFailure {
        path: String,
        source: std::io::Error,
    },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("foreground provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty list: {0}")]
    EmptyList(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data/io, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }
}
