use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {what}: {message}")]
    Parse { what: &'static str, message: String },

    #[error("layer {layer}: shape mismatch: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("layer {layer}: non-finite value in {field}")]
    NonFinite { layer: usize, field: &'static str },

    #[error("layer {layer}: unsupported activation kind `{kind}`")]
    UnsupportedActivation { layer: usize, kind: String },

    #[error("layer {layer}: {detail}")]
    Structure { layer: usize, detail: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("interval propagation overflowed at layer {layer}")]
    Overflow { layer: usize },

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
