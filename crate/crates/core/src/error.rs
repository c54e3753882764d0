use thiserror::Error;

#[derive(Debug, Error)]
pub enum CondaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("classes absent from labeled data: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("class index {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config value for `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CondaError {
    /// Stable machine-readable code used in CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            CondaError::Shape { .. } => "shape",
            CondaError::NotPositiveDefinite { .. } => "not_pd",
            CondaError::MissingClasses(_) => "missing_class",
            CondaError::ClassOutOfRange { .. } => "class_range",
            CondaError::InvalidInput(_) => "invalid_input",
            CondaError::Empty(_) => "empty",
            CondaError::Config { .. } => "config",
            CondaError::UnknownKey(_) => "unknown_key",
            CondaError::BadMagic { .. } => "bad_magic",
            CondaError::CrcMismatch { .. } => "crc_mismatch",
            CondaError::Truncated { .. } => "truncated",
            CondaError::Format(_) => "format",
            CondaError::Io(_) => "io",
            CondaError::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CondaError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CondaError>;
