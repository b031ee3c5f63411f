use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box lies entirely outside the {image_w}x{image_h} image")]
    OutOfFrame { image_w: u32, image_h: u32 },

    #[error("invalid synthesis spec: {0}")]
    SpecInvalid(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class {0} has no training items")]
    MissingClass(usize),

    #[error("detector model is not trained or loaded")]
    NoModel,

    #[error("no raster for image `{0}`")]
    MissingRaster(String),

    #[error("no predictions for image `{0}`")]
    MissingPrediction(String),

    #[error("{path}:{line}: {reason}")]
    MalformedFile {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("loss diverged to a non-finite value at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("region has no class probabilities")]
    MissingProbs,

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("dataset sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("parameter grid is empty")]
    EmptyGrid,

    #[error("image `{id}`: {source}")]
    Image {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid PPM data: {0}")]
    Ppm(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::OutOfFrame { .. } => "out_of_frame",
            Error::SpecInvalid(_) => "spec_invalid",
            Error::ConfigInvalid(_) => "config_invalid",
            Error::EmptyDataset => "empty_dataset",
            Error::MissingClass(_) => "missing_class",
            Error::NoModel => "no_model",
            Error::MissingRaster(_) => "missing_raster",
            Error::MissingPrediction(_) => "missing_prediction",
            Error::MalformedFile { .. } => "malformed_file",
            Error::DegenerateData(_) => "degenerate_data",
            Error::NonFinite { .. } => "non_finite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::MissingProbs => "missing_probs",
            Error::ModelMismatch(_) => "model_mismatch",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::EmptyGrid => "empty_grid",
            Error::Image { source, .. } | Error::Stage { source, .. } => source.code(),
            Error::Io { .. } => "io",
            Error::Ppm(_) => "ppm",
            Error::Json(_) => "json",
        }
    }

    /// Bad input supplied by the caller, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::SpecInvalid(_) | Error::ConfigInvalid(_) | Error::MalformedFile { .. } | Error::MissingClass(_)
        )
    }

    /// Attach the id of the image being processed.
    pub fn for_image(self, id: &str) -> Self {
        match self {
            e @ Error::Image { .. } => e,
            e => Error::Image {
                id: id.to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
