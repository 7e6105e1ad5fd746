use std::path::PathBuf;

/// Errors surfaced by the grounding library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("expression is empty")]
    EmptyExpression,
    #[error("bad image shape {height}x{width}: {reason}")]
    BadImageShape {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("feature grid {height}x{width} is too small for the pyramid")]
    GridTooSmall { height: usize, width: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("bad annotation at line {line}: {reason}")]
    BadAnnotation { line: usize, reason: String },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_id: usize,
        detail: String,
    },
    #[error("refusing to write into non-empty directory {0} (use --force)")]
    DirectoryNotEmpty(PathBuf),
    #[error("malformed run-length encoding: {0}")]
    BadRle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// True for errors caused by user-supplied input rather than a runtime failure.
    pub fn is_bad_input(&self) -> bool {
        matches!(
            self,
            Error::EmptyExpression
                | Error::BadImageShape { .. }
                | Error::BadAnnotation { .. }
                | Error::EmptyEvaluation
                | Error::Config(_)
                | Error::DirectoryNotEmpty(_)
                | Error::BadRle(_)
                | Error::Json(_)
                | Error::Image(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
