use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter or architecture setting.
    #[error("configuration error: {0}")]
    Config(String),

    /// Schema validation failure; every offending field is listed.
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidFields(Vec<String>),

    #[error("shape error: {0}")]
    Shape(String),

    /// A checkpoint or report does not fit the context it was loaded into.
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("data error: {0}")]
    Data(String),

    /// Training diverged; carries the step and loss components.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Stable machine-readable discriminant, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidFields(_) => "invalid_fields",
            Error::Shape(_) => "shape",
            Error::Incompatible(_) => "incompatible",
            Error::Parse(_) => "parse",
            Error::Data(_) => "data",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }

    /// Individual messages; a field list for schema errors, otherwise one entry.
    pub fn details(&self) -> Vec<String> {
        match self {
            Error::InvalidFields(fields) => fields.clone(),
            other => vec![other.to_string()],
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
