use std::path::PathBuf;

use tbnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("merge point {merge_point}: {detail}")]
    Merge { merge_point: usize, detail: String },
    #[error("branch pairing: {0}")]
    Pairing(String),
    #[error("mask does not match model: {0}")]
    Mask(String),
    #[error("{0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("{0}")]
    Data(String),
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: u64, detail: String },
    #[error("protocol error at merge point {merge_point}: {detail}")]
    Protocol { merge_point: usize, detail: String },
    #[error("refused: {0}")]
    Refused(String),
    #[error("finalization: {0}")]
    Finalize(String),
    #[error("stage order: {0}")]
    Stage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
