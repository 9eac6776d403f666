use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("variant {variant} requires condition `{missing}`")]
    MissingCondition {
        variant: &'static str,
        missing: &'static str,
    },

    #[error("autodiff tape overflow while unrolling k={k} student steps ({nodes} nodes)")]
    TapeOverflow { k: usize, nodes: usize },

    #[error("gradient reached frozen parameter `{0}`")]
    FrozenGradient(String),

    #[error("training diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("format error in {}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        msg: msg.into(),
    }
}
