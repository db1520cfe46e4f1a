use thiserror::Error;

/// Errors raised by the lab's numeric core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value violates its documented bound.
    #[error("configuration error: {0}")]
    Config(String),
    /// Inputs that must line up (batch vs. rewards, policy vs. space) do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A Monte Carlo estimator had nothing to average.
    #[error("estimation failed: {0}")]
    Estimation(String),
    /// Malformed serialized input.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}
