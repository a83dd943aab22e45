//! Crate-wide error type and the process exit codes the CLI maps it onto.

use thiserror::Error;

/// Everything that can go wrong, grouped by how the CLI reports it:
/// config errors exit 1, numeric failures exit 2, IO failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, CLI arguments, or incompatible inputs.
    #[error("config error: {0}")]
    Config(String),

    /// Shape mismatch handed to an engine primitive; carries the offending shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An engine-produced value was NaN or infinite. Never silent.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A gradient was supplied for a frozen or unknown parameter.
    #[error("gradient for non-trainable parameter `{0}`")]
    FrozenGradient(String),

    /// Backward requested on a tape that was not recorded for gradients.
    #[error("backward on a tape recorded without gradient tracking")]
    NoGradTape,

    /// Other numeric failure (divergence, degenerate input to an analysis op, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed data file; carries the 1-based line number when known.
    #[error("data error at line {line}: {detail}")]
    Data { line: usize, detail: String },

    /// Checkpoint container violations (bad magic, version, truncation, manifest mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code contract: 0 success, 1 config, 2 numeric, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data { .. } => 1,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::FrozenGradient(_)
            | Error::NoGradTape
            | Error::Numeric(_) => 2,
            Error::Checkpoint(_) | Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
