use thiserror::Error;

/// Errors raised across the engine. Messages are prefixed with the module
/// that produced them so command-line diagnostics stay attributable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape: {0}")]
    Shape(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("config: {0}")]
    Config(String),
    #[error("index: {0}")]
    Index(String),
    #[error("input: {0}")]
    Input(String),
    #[error("determinism: {0}")]
    Determinism(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("non-finite: {0}")]
    NonFinite(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad configuration or arguments, as opposed
    /// to failures while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
