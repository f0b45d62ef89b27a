//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected at load or validation time. The message names
    /// the offending field.
    #[error("config: {0}")]
    Config(String),
    /// Environment construction or simulation misuse.
    #[error("environment: {0}")]
    Env(String),
    /// Model evaluation failure (bad dimensions, out-of-range token ids).
    #[error("model: {0}")]
    Model(String),
    /// A computation produced NaN or infinity; training aborts rather than
    /// silently recovering.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("diagnostics: {0}")]
    Diagnostics(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
