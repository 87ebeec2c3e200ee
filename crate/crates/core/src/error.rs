//! Crate-wide error type.
//!
//! Errors fall into four deliberate categories that the command-line front
//! end maps onto distinct exit codes:
//!
//! * [`Error::Config`] — malformed or inconsistent configuration: bad shapes,
//!   unknown keys, invalid hyperparameters. Detected before or while setting
//!   up a run.
//! * [`Error::Data`] — malformed data flowing through a run: labels outside
//!   the declared label space, masks that do not match their label space.
//! * [`Error::Protocol`] — a violation of the online training protocol, e.g.
//!   a learner performing more updates than its per-batch budget.
//! * [`Error::Numeric`] — non-finite losses or gradients, or a failed
//!   numerical check.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the bench.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (shapes, keys, hyperparameters, file formats).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data encountered while running (labels, masks, splits).
    #[error("data error: {0}")]
    Data(String),

    /// The online training protocol was violated.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A numerical failure: non-finite values or a failed numeric check.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Convenience constructor for [`Error::Config`].
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Convenience constructor for [`Error::Data`].
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Convenience constructor for [`Error::Protocol`].
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Convenience constructor for [`Error::Numeric`].
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
