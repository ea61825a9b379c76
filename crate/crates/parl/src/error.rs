//! Crate-wide error type and exit-code mapping.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an API precondition (shape mismatch, bad index,
    /// incompatible model specs, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value (NaN or infinity) appeared during evaluation.
    /// The message carries the provenance of the first faulting node.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// A file could not be decoded.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Unsupported file format version.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse { offset, message: message.into() }
    }

    /// Process exit code used by the CLI: 2 for configuration and contract
    /// problems, 3 for numeric faults, 4 for I/O and file-format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Parse { .. } | Error::Version { .. } | Error::Io(_) => 4,
        }
    }
}
