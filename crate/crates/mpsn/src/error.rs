//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MpsnError>;

#[derive(Debug, Error)]
pub enum MpsnError {
    /// Two tensors/images that must agree in shape do not.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: String,
        left: String,
        right: String,
    },

    /// Input image below the minimum size the backbone supports.
    #[error("input too small: {height}x{width}, need at least {min}x{min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    /// A caller violated an internal contract (wrong stride, misaligned lists, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration (unknown arch, invalid key, out-of-range value).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed annotation or data file.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// No precomputed flow record for the requested frame pair.
    #[error("no precomputed flow for source '{source_id}' frame {index}")]
    MissingFlow { source_id: String, index: usize },

    /// An optical-flow provider failed.
    #[error("flow provider error: {0}")]
    Provider(String),

    /// AP is undefined without any ground-truth boxes.
    #[error("evaluation undefined: no ground-truth boxes")]
    NoGroundTruth,

    /// Non-finite value encountered where a finite one is required.
    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Checkpoint or data file with an unrecognized format.
    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl MpsnError {
    pub fn dim(context: impl Into<String>, left: impl Into<String>, right: impl Into<String>) -> Self {
        MpsnError::DimensionMismatch {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            MpsnError::Config(_) => 2,
            MpsnError::Numeric { .. } => 4,
            _ => 3,
        }
    }
}
