use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("bad magic in {kind} file: expected {expected:?}, found {found:?}")]
    BadMagic {
        kind: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        expected: u8,
        found: u8,
    },
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("rank/extent overflow: {0}")]
    Overflow(String),
    #[error("unsupported dtype code {0}")]
    DType(u8),
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error("configuration hash mismatch: stored {stored}, computed {computed}")]
    ConfigHash { stored: String, computed: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    RawIo(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
