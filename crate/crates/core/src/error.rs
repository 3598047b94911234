use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("face index {index} out of range for {vertices} vertices (line {line})")]
    IndexOutOfRange {
        index: i64,
        vertices: usize,
        line: usize,
    },

    #[error("degenerate mesh: {0}")]
    Degenerate(String),

    #[error("mesh has no faces")]
    ZeroFaces,

    #[error("invalid token sequence: {0}")]
    Grammar(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("context overflow at {scale} scale: capacity {capacity}")]
    ContextOverflow { scale: &'static str, capacity: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
