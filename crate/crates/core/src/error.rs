use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

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

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {}", .0.message().trim())]
    TomlDe(#[from] toml::de::Error),

    #[error("config write: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Stable, machine-parseable class name used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) => "config",
            Error::Missing { .. } => "missing",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}

macro_rules! bail_validation {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Validation(format!($($arg)*)))
    };
}

macro_rules! bail_shape {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Shape(format!($($arg)*)))
    };
}

pub(crate) use bail_shape;
pub(crate) use bail_validation;
