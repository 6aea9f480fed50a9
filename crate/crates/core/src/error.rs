use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}: line {line}: field `{field}`: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },

    #[error("frame {frame_id}: box {index}: invalid `{field}`")]
    InvalidBox {
        frame_id: u64,
        index: usize,
        field: String,
    },

    #[error("shape mismatch for `{name}`: expected {expected}, found {found}")]
    Shape {
        name: String,
        expected: String,
        found: String,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(name: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            name: name.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code, shared with the C API.
    pub fn code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Parse { .. } => 3,
            Error::InvalidBox { .. } => 4,
            Error::Shape { .. } => 5,
            Error::NonFiniteLoss { .. } => 6,
            Error::Io { .. } => 7,
            Error::Json { .. } => 8,
        }
    }
}
