use std::path::PathBuf;

use thiserror::Error;

use crate::lidar_stereo::CalibrationEstimate;

/// Errors produced by the calibration toolkit.
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient constraints: {found} correspondences, at least {required} required")]
    InsufficientConstraints { found: usize, required: usize },

    #[error("insufficient texture: {found} keypoints, at least {required} required")]
    InsufficientTexture { found: usize, required: usize },

    #[error("no keypoint with gradient above threshold")]
    EmptyKeypoints,

    #[error("no primitive visible from the sensor pose")]
    EmptyFrame,

    #[error("solver stalled after {rejections} consecutive rejected steps")]
    Stalled {
        rejections: usize,
        partial: Box<CalibrationEstimate>,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{}: parse error at byte {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CalibError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CalibError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalibError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CalibError> = std::result::Result<T, E>;
