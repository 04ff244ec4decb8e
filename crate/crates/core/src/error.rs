use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank {rank} out of range: must satisfy {min} <= rank <= {max}")]
    RankOutOfRange { rank: usize, min: usize, max: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("dense coverage violated: first gap at (frame {frame}, point {point})")]
    DenseCoverage { frame: usize, point: usize },

    #[error("degenerate direction: every frame was skipped")]
    DegenerateDirection,

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True when the error stems from bad user input rather than a failure at
    /// runtime. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Dimension(_)
                | Error::RankOutOfRange { .. }
                | Error::NonFinite(_)
                | Error::DenseCoverage { .. }
                | Error::Parse { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
