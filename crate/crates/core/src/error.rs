use thiserror::Error;

/// Errors raised by the poseforge library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Parse(String),

    #[error("keypoint count ≠ 18 (frame {frame} has {count})")]
    KeypointCount { frame: usize, count: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("keypoint floor violated: {0}")]
    KeypointFloor(String),

    #[error("no comparable keypoints")]
    NoComparableKeypoints,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Domain failures (degenerate geometry, divergence) as opposed to bad
    /// input or I/O.
    pub fn is_domain(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::Divergence(_) | Error::KeypointFloor(_) | Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
