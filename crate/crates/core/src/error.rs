use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    ShapeMismatch { op: &'static str, shapes: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor does not belong to this tape")]
    ForeignTensor,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing gradient for parameter of shape {0:?}")]
    MissingGradient(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error("divergence in {phase}: loss {loss}")]
    Divergence { phase: &'static str, loss: f32 },

    #[error("domain {domain}: {source}")]
    Domain {
        domain: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            shapes: shapes.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_domain(self, domain: &str) -> Self {
        Error::Domain {
            domain: domain.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping domain wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Domain { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::Checksum { .. } => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }

    /// Short machine-parsable code printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self.root() {
            Error::Config(_) => "CONFIG",
            Error::Checksum { .. } => "CHECKSUM",
            Error::Divergence { .. } | Error::NonFinite(_) => "DIVERGENCE",
            Error::Io { .. } => "IO",
            Error::Data(_) | Error::Serde(_) => "DATA",
            _ => "INTERNAL",
        }
    }
}
