use thiserror::Error;

/// Errors raised by density, transport, flow and training operations.
#[derive(Debug, Error)]
pub enum FlowError {
    /// A point or time lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed arguments: mismatched dimensions, out-of-range axes, bad configs.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Numerical breakdown (non-finite values, solver failure).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The request is valid but exceeds what the estimator supports.
    #[error("unsupported: {0}")]
    Capability(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl FlowError {
    pub fn domain(msg: impl Into<String>) -> Self {
        FlowError::Domain(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        FlowError::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        FlowError::Numeric(msg.into())
    }

    /// Prefixes the message with trajectory or iteration context.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            FlowError::Domain(m) => FlowError::Domain(format!("{ctx}: {m}")),
            FlowError::Argument(m) => FlowError::Argument(format!("{ctx}: {m}")),
            FlowError::Numeric(m) => FlowError::Numeric(format!("{ctx}: {m}")),
            FlowError::Capability(m) => FlowError::Capability(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;
