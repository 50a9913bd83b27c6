use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. Variants are grouped by category so
/// that the command-line front end can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("non-square feature grid: ceil(H/H_FM) = {k_h} but ceil(W/W_FM) = {k_w}")]
    NonSquareGrid { k_h: usize, k_w: usize },

    #[error("invalid step {step}: must satisfy 0 < step <= K - 2 = {max}")]
    InvalidStep { step: usize, max: i64 },

    #[error("configuration mismatch: {0}")]
    ConfigurationMismatch(String),

    #[error("invalid input shape: {0}")]
    InvalidInputShape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid comparison: {0}")]
    InvalidComparison(String),

    #[error("true positive rate is undefined: the ground truth contains no lesions")]
    UndefinedTpr,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("could not place lesion {lesion} in image {image} after {attempts} attempts")]
    Placement {
        image: usize,
        lesion: usize,
        attempts: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, stable across releases. Used in diagnostics and
    /// to derive process exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidGeometry(_) | Error::NonSquareGrid { .. } | Error::InvalidStep { .. } => {
                "geometry"
            }
            Error::ConfigurationMismatch(_) | Error::InvalidConfig(_) => "config",
            Error::InvalidInputShape(_) | Error::InvalidInput(_) | Error::InvalidMask(_) => "input",
            Error::InvalidComparison(_) | Error::UndefinedTpr => "evaluation",
            Error::Annotation(_) | Error::Placement { .. } => "data",
            Error::NonFiniteLoss { .. } => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } | Error::Image { .. } | Error::Csv { .. } | Error::Json { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "io" => 2,
            "config" => 3,
            "geometry" => 4,
            "input" => 5,
            "data" => 6,
            "evaluation" => 7,
            "training" => 8,
            "checkpoint" => 9,
            _ => 1,
        }
    }
}
