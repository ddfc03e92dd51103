use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or malformed configuration document.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A snapshot holds more aircraft than the padded container allows.
    #[error("set overflow: snapshot has {count} aircraft but N_max is {n_max}")]
    Overflow { count: usize, n_max: usize },

    /// Loss or parameters became NaN/Inf during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Overflow { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::NonFinite(_) => 4,
        }
    }
}
