use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("missing weight blob {0}")]
    MissingBlob(PathBuf),

    #[error("layer `{layer}` references unknown input `{input}`")]
    DanglingEdge { layer: String, input: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("annotation references unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("model has no quantizable layers")]
    NoQuantizableLayers,

    #[error("dataset is not fully labeled")]
    Unlabeled,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("class {class} has {available} images, {requested} requested")]
    InsufficientImages {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("labels file references missing image `{0}`")]
    MissingImage(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
