use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum MvsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("degenerate plane-induced homography: {0}")]
    DegenerateHomography(String),
    #[error("plane evaluation out of range: {0}")]
    OutOfRange(String),
    #[error("triangulation failed: {0}")]
    TriangulationFailed(String),
    #[error("no valid pixels for metrics")]
    EmptyMetrics,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("insufficient frames: {0}")]
    InsufficientFrames(String),
    #[error("invalid output: {0}")]
    InvalidOutput(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("frame {frame}, {stage}: {source}")]
    Stage {
        frame: usize,
        stage: String,
        #[source]
        source: Box<MvsError>,
    },
}

pub type Result<T> = std::result::Result<T, MvsError>;

impl MvsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MvsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        MvsError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Attach the frame index and pipeline stage to an error.
    pub fn in_stage(self, frame: usize, stage: impl Into<String>) -> Self {
        MvsError::Stage {
            frame,
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
