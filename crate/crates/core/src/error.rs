use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("source sample without mask: {0}")]
    MissingMask(String),

    #[error("unreadable image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("malformed annotation {path}: {reason}")]
    Annotation { path: PathBuf, reason: String },

    #[error("degenerate polygon with {0} vertices (need at least 3)")]
    DegeneratePolygon(usize),

    #[error("unknown sample id {0}")]
    DanglingSample(String),

    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { term: &'static str, epoch: usize, step: usize },

    #[error("malformed csv {path} row {row}: {reason}")]
    Csv { path: PathBuf, row: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
