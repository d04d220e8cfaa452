use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest entry `{id}`: {reason}")]
    Manifest { id: String, reason: String },

    #[error("invalid document {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("archive format error: {0}")]
    Format(String),

    #[error("missing quantization spec for tensor `{0}`")]
    MissingSpec(String),

    #[error("non-finite loss component `{component}` at stage `{stage}` epoch {epoch}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        component: String,
    },

    #[error("stage `{stage}` epoch {epoch}: {source}")]
    Stage {
        stage: String,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Argument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
            Error::MissingSpec(_) => "missing_spec",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Stage { .. } => "stage",
        }
    }
}
