use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// Every variant maps to a short machine-readable tag (see [`Error::tag`])
/// that the command-line driver prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated input while reading {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Contract(_) => "E_CONTRACT",
            Error::Config(_) => "E_CONFIG",
            Error::BadMagic { .. } => "E_BAD_MAGIC",
            Error::Version { .. } => "E_VERSION",
            Error::Truncated(_) => "E_TRUNCATED",
            Error::Format(_) => "E_FORMAT",
            Error::Io(_) => "E_IO",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
