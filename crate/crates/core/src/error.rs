use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input outside the op's domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data: {0}")]
    Data(String),

    #[error("episode sampling: {0}")]
    Sampling(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at episode {episode}: total loss is not finite")]
    Diverged { episode: usize },

    #[error("episode {index}: {source}")]
    InEpisode {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_episode(index: usize, source: Error) -> Self {
        Error::InEpisode {
            index,
            source: Box::new(source),
        }
    }

    /// Strips episode wrappers to reach the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::InEpisode { source, .. } => source.root(),
            other => other,
        }
    }
}
