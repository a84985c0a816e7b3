//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input sequence shorter than an operation's minimum length.
    #[error("input too short: {0}")]
    Length(String),
    /// Malformed or corrupt data (non-finite samples, unknown ids, misaligned sets).
    #[error("data error: {0}")]
    Data(String),
    /// Bad magic, version or shape in a binary file.
    #[error("format error: {0}")]
    Format(String),
    /// Numerical degeneracy (zero vectors, non-finite loss, zero variance).
    #[error("numerics error: {0}")]
    Numerics(String),
    /// Batch does not satisfy an operation's batch-size precondition.
    #[error("batch error: {0}")]
    Batch(String),
    /// Attention mask with no valid steps.
    #[error("mask error: {0}")]
    Mask(String),
    /// Invalid or inconsistent manifest.
    #[error("manifest error: {0}")]
    Manifest(String),
    /// Synthetic corpus spec that cannot produce valid utterances.
    #[error("spec error: {0}")]
    Spec(String),
    /// Configuration inconsistent with a checkpoint or itself.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerics(_) => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
