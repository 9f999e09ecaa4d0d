use thiserror::Error;

/// Coarse failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid quaternion: norm {norm} is not within 1e-6 of 1")]
    InvalidQuaternion { norm: f64 },

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("joint vector has {got} angles but the chain has {expected} joints")]
    JointCount { expected: usize, got: usize },

    #[error("joint {index} angle {angle} outside limits [{min}, {max}]")]
    JointLimit {
        index: usize,
        angle: f64,
        min: f64,
        max: f64,
    },

    #[error("unreachable pose: best residual {position} m / {orientation} rad")]
    UnreachablePose { position: f64, orientation: f64 },

    #[error("underdetermined calibration: {0}")]
    UnderdeterminedCalibration(String),

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
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

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error::Data(message.into())
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::Shape(_) => ErrorCategory::Config,
            Error::Diverged { .. } => ErrorCategory::Divergence,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
