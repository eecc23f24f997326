use std::path::PathBuf;

use provnet_engine::{Checkpoint, EngineError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent data (frames, sidecars, patch files).
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent settings: architecture plans, class lists, splits.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Training hit a non-finite loss or gradient. Carries the best
    /// checkpoint recorded before the failure, if any epoch completed.
    #[error("training aborted at epoch {epoch}: {reason}")]
    Aborted {
        epoch: usize,
        reason: String,
        last_good: Option<Box<Checkpoint>>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
