use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box [{x0}, {y0}, {x1}, {y1}]: {reason}")]
    InvalidBox {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        reason: &'static str,
    },

    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),

    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("teacher produced no detections")]
    EmptyTeacher,

    #[error("evaluation set has no ground-truth boxes")]
    NoGroundTruth,

    #[error("detection references unknown image id {0:?}")]
    UnknownImage(String),

    #[error("cannot split an empty record list")]
    EmptyDataset,

    #[error("record {0:?} is not fully annotated")]
    NotFullyAnnotated(String),

    #[error("non-finite loss ({0}) in training step")]
    NonFiniteLoss(f64),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_open_unit(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            range: "(0, 1)",
        })
    }
}

pub(crate) fn check_closed_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            range: "[0, 1]",
        })
    }
}
