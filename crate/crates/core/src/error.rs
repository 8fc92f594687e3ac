use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped so a command-line front end can map each family to a
/// distinct exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("frozen-contract violation: {0}")]
    FrozenViolation(String),

    #[error("stale gradient: {0}")]
    StaleGradient(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
