use std::path::PathBuf;

/// Errors raised across the toolkit. Variants map onto the CLI exit-code
/// classes via [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed audio file: {0}")]
    Format(String),
    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("empty output: {0}")]
    EmptyOutput(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("value out of bounds: {0}")]
    Bounds(String),
    #[error("note too short: duration {dur} samples does not exceed delay {delay}")]
    NoteTooShort { dur: usize, delay: usize },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate output: {0}")]
    Degenerate(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 usage/config, 3 data, 4 numeric; everything else counts as data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Bounds(_) | Error::Compatibility(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
