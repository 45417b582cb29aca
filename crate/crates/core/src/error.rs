use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an invalid id, shape, or argument.
    #[error("invalid input: {0}")]
    Input(String),

    /// A probability table violates the full-support requirement.
    #[error("full-support violation: {0}")]
    Support(String),

    /// Inconsistent run or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset construction could not complete.
    #[error("dataset construction failed: {0}")]
    Construction(String),

    /// An accuracy was requested over a set with no decidable pairs.
    #[error("accuracy undefined: {0}")]
    UndefinedAccuracy(String),

    /// An oracle instance exceeds the enumeration budget.
    #[error("instance too large: {0}")]
    Capacity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
