use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric overflow at sample {sample}: {context}")]
    NumericOverflow { sample: usize, context: String },

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },

    #[error("client error after {attempts} attempt(s): {message}")]
    Client { attempts: u32, message: String },

    #[error("could not parse response: {message}")]
    Parse { message: String, raw: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("optimization aborted at step {step}: {message}")]
    NumericAbort { step: usize, message: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("batch item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("source {index}: {source}")]
    Source {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Innermost error once batch/source wrappers are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Batch { source, .. } | Error::Source { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
