use thiserror::Error;

/// Errors raised by the library.
///
/// Check *failures* (a validator finding a counterexample, a comparison
/// exceeding its bound) are not errors; they live in reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource limit exceeded: {what} (limit {limit})")]
    ResourceLimit { what: String, limit: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure ({context}): {message}")]
    Numeric { context: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("absorbing state at {0:?}")]
    Absorbing(Vec<i64>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn resource(what: impl Into<String>, limit: u64) -> Self {
        Error::ResourceLimit {
            what: what.into(),
            limit,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }
}
