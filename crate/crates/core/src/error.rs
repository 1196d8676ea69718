use std::path::PathBuf;

/// Errors raised by the library. Each variant maps to one process exit code
/// in the CLI (see `harness::exit_code`).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape or invariant precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An invalid configuration (bad head count, unknown stage, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file did not match the expected binary or JSON format.
    #[error("format error: {0}")]
    Format(String),

    /// A tensor file ended early or carried trailing bytes.
    #[error("length error: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Two baseline evaluations of a supposedly deterministic function differed.
    #[error("determinism error: {0}")]
    NonDeterministic(String),

    /// A numerical check failed (gradient mismatch or similar).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training failure: loss became non-finite at step {step}")]
    Diverged { step: usize },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape_mismatch(what: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Contract(format!("{what}: expected {expected:?}, got {got:?}"))
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
