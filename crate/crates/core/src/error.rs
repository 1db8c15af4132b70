use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },

    #[error("scene contains no Gaussians")]
    EmptyScene,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("view index {view} out of range (scene has {count} views)")]
    InvalidView { view: usize, count: usize },

    #[error("resolution mismatch: {0}")]
    Resolution(String),

    #[error("weight sink mode mismatch: {0}")]
    SinkMode(String),

    #[error("{n_classes} classes do not fit in {dim} orthogonal dimensions")]
    Capacity { n_classes: usize, dim: usize },

    #[error("training diverged at epoch {epoch} (loss {loss}); try a smaller learning rate")]
    Divergence { epoch: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.into(),
        }
    }
}
