use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate ground truth: inter-ocular distance {0:e} below 1e-9")]
    DegenerateGroundTruth(f64),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged at epoch {epoch}: batch loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("backward pass does not match a retained forward pass: {0}")]
    NoForwardTrace(String),

    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),

    #[error("unsupported landmark layout: {0}")]
    UnsupportedLayout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("container format error: {0}")]
    Format(String),

    #[error("unsupported container version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("annotation parse error at line {line}: {msg}")]
    Annotation { line: usize, msg: String },

    #[error("missing artifact {path}: run `tcnn {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::Degenerate(_) | Error::DegenerateGroundTruth(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
