//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is at the log branch cut (pi)")]
    LogBranchAmbiguity { angle: f64 },

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image {width}x{height} too small for {levels} pyramid levels (coarsest must be at least 8x8)")]
    ImageTooSmall {
        width: u32,
        height: u32,
        levels: usize,
    },

    #[error("plane fit rejected: {inliers} inliers, need at least {min_inliers}")]
    PlaneFitRejected { inliers: usize, min_inliers: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("chessboard detection failed: {0}")]
    ChessboardFailed(String),

    #[error("calibration refinement diverged after {iterations} iterations")]
    CalibrationDiverged { iterations: usize },

    #[error("tracking lost: {reason} (valid ratio {valid_ratio:.3}, weighted rms {weighted_rms:.1})")]
    TrackingLost {
        reason: String,
        valid_ratio: f64,
        weighted_rms: f64,
    },

    #[error("loop alignment failed: {0}")]
    AlignmentFailed(String),

    #[error("keyframe excluded from loop database: {0}")]
    KeyframeExcluded(String),

    #[error("invalid vocabulary file: {0}")]
    InvalidVocabulary(String),

    #[error("missing anchor keyframe {0} in corrected poses")]
    MissingAnchor(u64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("trajectory evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Helper for data-file errors that carry the offending path.
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }
}
