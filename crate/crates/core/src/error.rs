use std::path::PathBuf;

use crate::idsampler::IdentityPool;

/// Failure modes of the subprocess generator bridge.
#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("failed to launch bridge command `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bridge command timed out after {seconds}s")]
    Timeout { seconds: u64 },
    #[error("bridge command exited with status {code:?}: {stderr}")]
    NonZeroExit { code: Option<i32>, stderr: String },
    #[error("bridge batch {batch} incomplete: missing output for index {index}")]
    IncompleteBatch { batch: usize, index: usize },
    #[error("bridge output {path} is malformed: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("cholesky factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("requested rank {requested} exceeds achievable rank {achievable}")]
    Rank { requested: usize, achievable: usize },
    #[error("candidate budget exhausted: {accepted} accepted, {rejected} rejected")]
    Exhaustion {
        accepted: usize,
        rejected: usize,
        partial: Box<IdentityPool>,
    },
    #[error("similarity constraint unreachable: best similarity {best} < {s_min}")]
    Constraint { best: f64, s_min: f64 },
    #[error("non-finite value at iteration {iteration}: {what}")]
    Numeric { iteration: usize, what: String },
    #[error("evaluation budget exceeded: need {needed}, cap {cap}")]
    Budget { needed: usize, cap: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("index {index} out of range for dimension {dim}")]
    Index { index: usize, dim: usize },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pipeline aborted in stage `{stage}` (last completed: {completed:?}): {source}")]
    Stage {
        stage: String,
        completed: Option<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Coarse error class used for process exit codes and diagnostics.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Bridge(_) => ErrorClass::Bridge,
            Error::Factorization { .. }
            | Error::Numeric { .. }
            | Error::Constraint { .. }
            | Error::Budget { .. } => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Bridge,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Bridge => 4,
            ErrorClass::Numeric => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Bridge => "bridge",
            ErrorClass::Numeric => "numeric",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
