use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error(
        "non-finite loss at step {step} (inpainting items {inpainting}, text-to-image items {text_to_image}, t mean {t_mean:.1}, t max {t_max})"
    )]
    NonFiniteLoss {
        step: u64,
        inpainting: usize,
        text_to_image: usize,
        t_mean: f64,
        t_max: usize,
    },

    #[error("non-finite latent at sampling step {0}")]
    NonFiniteLatent(usize),

    #[error("dataset sample {id}: {reason}")]
    Sample { id: usize, reason: String },

    #[error("checkpoint {field}: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("evaluation refused: {0}")]
    Refused(String),

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

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
