use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An exact oracle was asked for a value outside its validated range.
    #[error("range error: {0}")]
    Range(String),

    /// The inputs describe a degenerate configuration (zero-length sums,
    /// identical samples, and so on).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A method cannot be evaluated on the data at hand (e.g. pose-based
    /// scores on a bank without poses).
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed {file} at byte {offset}: {message}")]
    Format {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("malformed JSON in {file} at `{path}`: {message}")]
    Json {
        file: String,
        path: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
