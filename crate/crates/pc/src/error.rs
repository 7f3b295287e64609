use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PcError {
    #[error(transparent)]
    Core(#[from] pc_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: {source}")]
    Toml {
        context: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    /// A file that parsed but does not have the expected structure.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type PcResult<T> = Result<T, PcError>;

impl PcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            context: context.into(),
            source,
        }
    }

    /// The core error underneath, if any.
    pub fn core(&self) -> Option<&pc_core::Error> {
        match self {
            Self::Core(e) => Some(e.root()),
            _ => None,
        }
    }
}
