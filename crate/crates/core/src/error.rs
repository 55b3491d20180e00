use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the correlation and crack-analysis pipeline.
#[derive(Debug, Error)]
pub enum DicError {
    #[error("failed to read image {path}: {reason}")]
    ImageRead { path: PathBuf, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("coordinate ({x:.3}, {y:.3}) outside the interpolation domain")]
    OutOfBounds { x: f64, y: f64 },

    #[error("subset has (near) zero intensity variance")]
    DegenerateSubset,

    #[error("invalid subset: {0}")]
    InvalidSubset(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("every seed failed to correlate in frame {frame}")]
    FrameFailure { frame: usize },

    #[error("angle undefined at y = 0 with x != x0")]
    UndefinedAngle,

    #[error("could not generate a speckle pattern with MIG >= {floor} after {attempts} attempts (best {best:.2})")]
    SpeckleQuality { floor: f64, attempts: usize, best: f64 },

    #[error("no valid points to evaluate")]
    NoValidPoints,

    #[error("physical scale (mm/pixel) is required")]
    MissingScale,

    #[error("no crack tip found: {0}")]
    NoTip(String),

    #[error("no CTOD plateau of at least 3x3 probes: {0}")]
    NoPlateau(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DicError>;
