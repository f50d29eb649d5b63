use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library reports. The variants map one-to-one onto the
/// CLI exit-code classes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("storage error: {context}: {source}")]
    Storage {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("corruption detected: {0}")]
    Corruption(String),

    #[error("store is busy: {0}")]
    Busy(String),

    #[error("audit incomplete: {0}")]
    AuditIncomplete(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("inconsistent interaction log at seq {seq}: {message}")]
    LogInconsistency { seq: u64, message: String },

    #[error("graph contains a cycle through {witness:?}")]
    CyclicGraph { witness: Vec<String> },

    #[error("execution backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("sub-container plan incomplete, missing: {missing:?}")]
    PlanIncomplete { missing: Vec<PathBuf> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("internal error: {0}")]
    Internal(String),
}

/// Coarse error classes, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    BackendUnavailable,
    Storage,
    Transport,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::BackendUnavailable => 3,
            ErrorClass::Storage => 4,
            ErrorClass::Transport => 5,
            ErrorClass::Internal => 1,
        }
    }
}

impl Error {
    pub fn storage(context: impl Into<String>, source: io::Error) -> Self {
        Error::Storage {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::NotFound(_)
            | Error::Parse { .. }
            | Error::LogInconsistency { .. }
            | Error::Config(_) => ErrorClass::Usage,
            Error::BackendUnavailable(_) => ErrorClass::BackendUnavailable,
            Error::Storage { .. }
            | Error::Corruption(_)
            | Error::Busy(_)
            | Error::AuditIncomplete(_)
            | Error::PlanIncomplete { .. } => ErrorClass::Storage,
            Error::Transport(_) => ErrorClass::Transport,
            Error::CyclicGraph { .. } | Error::Internal(_) => ErrorClass::Internal,
        }
    }

    /// Short machine-readable kind name used in JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NotFound(_) => "not-found",
            Error::Storage { .. } => "storage-error",
            Error::Corruption(_) => "corruption-error",
            Error::Busy(_) => "busy",
            Error::AuditIncomplete(_) => "audit-incomplete",
            Error::Parse { .. } => "parse-error",
            Error::LogInconsistency { .. } => "log-inconsistency",
            Error::CyclicGraph { .. } => "cyclic-graph",
            Error::BackendUnavailable(_) => "backend-unavailable",
            Error::PlanIncomplete { .. } => "plan-incomplete",
            Error::Config(_) => "config-error",
            Error::Transport(_) => "transport-error",
            Error::Internal(_) => "internal-error",
        }
    }
}

/// Attaches a path or operation description to raw I/O errors.
pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::storage(context(), e))
    }
}
