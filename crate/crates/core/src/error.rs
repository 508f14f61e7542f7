use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node is not a differentiable leaf of this graph")]
    DetachedLeaf,

    #[error("node belongs to a different graph")]
    ForeignNode,

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),

    #[error("malformed file {}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code: 2 validation, 3 missing artifact, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::NonScalarLoss(_)
            | Error::DetachedLeaf
            | Error::ForeignNode
            | Error::Layout(_)
            | Error::Invalid(_)
            | Error::Config { .. }
            | Error::Malformed { .. } => 2,
            Error::Missing(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::Numerical(_) => 4,
        }
    }
}
