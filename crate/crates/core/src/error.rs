use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid layer spec {layer}: {reason}")]
    InvalidSpec { layer: String, reason: String },

    #[error("cache does not belong to layer {layer}")]
    CacheMismatch { layer: String },

    #[error("non-finite gradient in {layer}")]
    NonFiniteGradient { layer: String },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input length {input_length} too small at stage {stage}")]
    InputTooShort { input_length: usize, stage: String },

    #[error("signal error: {0}")]
    Signal(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("column {0} cannot be resolved")]
    UnresolvedColumn(String),

    #[error("no valid rows in {0}")]
    NoValidRows(String),

    #[error("timestamps out of order beyond tolerance in {source_name} at row {row}")]
    TimestampDisorder { source_name: String, row: usize },

    #[error("unknown acquisition function {0:?}")]
    UnknownFunction(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn spec(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input data rather than a bug or an environment failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Checksum { .. }
                | Error::Truncated(_)
                | Error::Malformed(_)
                | Error::UnresolvedColumn(_)
                | Error::NoValidRows(_)
                | Error::TimestampDisorder { .. }
                | Error::Data(_)
                | Error::Csv(_)
                | Error::TomlDe(_)
                | Error::Io(_)
        )
    }
}
