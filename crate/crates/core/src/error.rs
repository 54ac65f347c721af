use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("pixel feature at (image {image}, y {y}, x {x}) has degenerate norm {norm:e}")]
    DegenerateFeature { image: usize, y: usize, x: usize, norm: f64 },

    #[error("label {label} at (image {image}, y {y}, x {x}) is not a current class")]
    UnknownLabel { image: usize, y: usize, x: usize, label: u8 },

    #[error("no image contains class {0}")]
    EmptySupport(u8),

    #[error("class {0} is already present in the classifier")]
    ClassExists(u8),

    #[error("class {class}: need {needed} eligible images, only {available} available")]
    InsufficientImages { class: u8, needed: usize, available: usize },

    #[error("class count mismatch: student has {student}, teacher has {teacher}")]
    ClassCountMismatch { student: usize, teacher: usize },

    #[error("loss variant {0} requires a teacher")]
    MissingTeacher(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("rejection sampling exceeded {attempts} attempts for image {image}")]
    PlacementFailed { image: u64, attempts: usize },

    #[error("malformed file {path}: {msg} (byte offset {offset})")]
    Format { path: String, offset: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("fold {fold}, trial {trial}: {source}")]
    Run { fold: usize, trial: usize, source: Box<Error> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
