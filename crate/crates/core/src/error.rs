use std::path::PathBuf;

use crate::metrics::VerificationCurves;

/// Errors produced anywhere in the inpainting toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("image too small for the requested scale pyramid: {0}")]
    Scale(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss component `{name}` = {value}")]
    InvalidLoss { name: String, value: f64 },

    #[error("inversion diverged after {} evaluations", trace.len())]
    Divergence { trace: Vec<f64> },

    #[error("landmark backend failure: {0}")]
    LandmarkBackend(String),

    #[error("covariance is degenerate: {0}")]
    Conditioning(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("pair list needs both genuine and impostor pairs ({genuine} genuine, {impostor} impostor)")]
    InsufficientPairs {
        genuine: usize,
        impostor: usize,
        curves: Box<VerificationCurves>,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("weight archive error: {0}")]
    Archive(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
