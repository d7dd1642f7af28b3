use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain mismatch: expected {expected}, got {got}")]
    DomainMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
