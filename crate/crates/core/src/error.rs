use std::fmt;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("invalid value for `{field}`: {msg}")]
    InvalidValue { field: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not an LPFT checkpoint (bad magic bytes)")]
    BadMagic,

    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("incompatible adapter: {0}")]
    Compatibility(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub(crate) fn layout(msg: impl fmt::Display) -> Self {
        Error::Layout(msg.to_string())
    }

    pub(crate) fn invalid(field: &str, msg: impl fmt::Display) -> Self {
        Error::InvalidValue {
            field: field.to_string(),
            msg: msg.to_string(),
        }
    }
}
