use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid edge: {0}")]
    InvalidEdge(String),

    #[error("cosine similarity with a zero vector ({0})")]
    ZeroVector(String),

    #[error("stale {artifact}: built for parameters {found}, model has {expected}")]
    Stale {
        artifact: &'static str,
        expected: String,
        found: String,
    },

    #[error("missing {artifact}; build it with `{hint}`")]
    MissingArtifact {
        artifact: &'static str,
        hint: &'static str,
    },

    #[error("treebank is empty")]
    EmptyTreebank,

    #[error("misaligned treebanks: {0}")]
    Misaligned(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::InvalidEdge(_) => "invalid-edge",
            Error::ZeroVector(_) => "zero-vector",
            Error::Stale { .. } => "stale",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::EmptyTreebank => "empty-treebank",
            Error::Misaligned(_) => "misaligned",
            Error::Config(_) => "config",
            Error::Diverged(_) => "diverged",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
