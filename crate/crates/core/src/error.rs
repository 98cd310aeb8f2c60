use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("both sampling densities are zero")]
    ZeroDensity,

    #[error("environment map has no light energy")]
    NoLightEnergy,

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("render output is stale: scene geometry changed since the forward pass")]
    StaleRender,

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("malformed PFM {path}: {reason}")]
    Pfm { path: PathBuf, reason: String },

    #[error("invalid capture set:\n  {}", .0.join("\n  "))]
    InvalidCaptureSet(Vec<String>),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}
