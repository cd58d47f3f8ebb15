//! Crate-wide error type.

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration; names the violated bound.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical blow-up (NaN/Inf) during integration or training.
    #[error("numerical instability at step {step}: {detail}")]
    Instability { step: usize, detail: String },

    /// Shape or length mismatch between coupled values.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The Kalman filter produced a non-finite Jacobian or innovation
    /// variance and cannot continue.
    #[error("filter diverged at step {step}")]
    FilterDivergence { step: usize },

    /// Operation asked of a network whose activations do not support it.
    #[error("unsupported activation: {0}")]
    UnsupportedActivation(String),

    /// Invalid argument outside the config-file path.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
