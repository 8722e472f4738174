use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HseError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HseError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by input data or files rather than by the program.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            HseError::Format(_)
                | HseError::Io { .. }
                | HseError::Image { .. }
                | HseError::Json(_)
                | HseError::Lookup(_)
                | HseError::Sampling(_)
        )
    }
}

pub type Result<T, E = HseError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HseError::Dimension(msg.into()))
}
