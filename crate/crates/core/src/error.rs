use thiserror::Error;

/// Errors produced anywhere in the engine.
///
/// Every variant maps to a stable short code (see [`Error::code`]) that the
/// command-line front end prints as a diagnostic prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate vector: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("prototype initialization failed: {0}")]
    Init(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("index error: {0}")]
    Index(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("phantom spec error: {0}")]
    Phantom(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIM",
            Error::State(_) => "E_STATE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Config(_) => "E_CONFIG",
            Error::Input(_) => "E_INPUT",
            Error::Init(_) => "E_INIT",
            Error::Format { .. } => "E_FORMAT",
            Error::Index(_) => "E_INDEX",
            Error::Parameter(_) => "E_PARAM",
            Error::Phantom(_) => "E_PHANTOM",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
