use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid primitive {index}: {message}")]
    InvalidPrimitive { index: usize, message: String },

    #[error("invalid camera {index}: {message}")]
    InvalidCamera { index: usize, message: String },

    #[error("unsupported PLY file: {0}")]
    Ply(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown {0}")]
    UnknownKind(String),

    #[error("floater placement failed: placed {placed} of {requested}")]
    Placement { placed: usize, requested: usize },

    #[error("denoiser failed at step {step} (sigma {sigma}): {message}")]
    Denoiser {
        step: usize,
        sigma: f64,
        message: String,
    },

    #[error("bridge timed out waiting for {0}")]
    BridgeTimeout(PathBuf),

    #[error("non-finite loss at refine step {step} (role {role}, view {view})")]
    NonFiniteLoss {
        step: usize,
        role: String,
        view: usize,
    },

    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
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

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidPrimitive { .. } => "invalid_primitive",
            Error::InvalidCamera { .. } => "invalid_camera",
            Error::Ply(_) => "ply",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::UnknownKind(_) => "unknown_kind",
            Error::Placement { .. } => "placement",
            Error::Denoiser { .. } => "denoiser",
            Error::BridgeTimeout(_) => "bridge_timeout",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Stage { .. } => "stage",
        }
    }
}
