use std::path::PathBuf;

use synthrefine_tape::WeightFileError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("invalid weight `{0}`: weights must be finite and non-negative")]
    InvalidWeight(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported raster format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid parameter `{0}`")]
    InvalidParams(String),
    #[error("image referenced by manifest not found: {}", .0.display())]
    MissingImage(PathBuf),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged: {0}")]
    DivergenceDetected(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("missing layer `{0}`")]
    MissingLayer(String),
    #[error("mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("image too small for the matting window: {0}x{1}")]
    ImageTooSmall(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("estimator has not been trained")]
    NotTrained,
    #[error("gaze vector is not unit length (norm {0})")]
    NonUnitInput(f64),
    #[error("pair mismatch: {0}")]
    PairMismatch(String),
    #[error("run directory has no logs or checkpoints: {}", .0.display())]
    MissingRun(PathBuf),
    #[error("weight file: {0}")]
    Weights(#[from] WeightFileError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable short code for machine-parsable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::ParseError { .. } => "ParseError",
            Error::InvalidWeight(_) => "InvalidWeight",
            Error::Io(_) => "IOError",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::InvalidParams(_) => "InvalidParams",
            Error::MissingImage(_) => "MissingImage",
            Error::Shape(_) => "ShapeError",
            Error::EmptyDataset => "EmptyDataset",
            Error::DivergenceDetected(_) => "DivergenceDetected",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::MissingLayer(_) => "MissingLayer",
            Error::MaskMismatch(_) => "MaskMismatch",
            Error::ImageTooSmall(..) => "ImageTooSmall",
            Error::EmptyBatch => "EmptyBatch",
            Error::NotTrained => "NotTrained",
            Error::NonUnitInput(_) => "NonUnitInput",
            Error::PairMismatch(_) => "PairMismatch",
            Error::MissingRun(_) => "MissingRun",
            Error::Weights(_) => "WeightFile",
            Error::Csv(_) => "ParseError",
            Error::Image(_) => "UnsupportedFormat",
        }
    }
}
