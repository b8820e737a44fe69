use std::path::PathBuf;

/// Errors raised by the toolkit.
///
/// Variants are grouped so callers (the CLI in particular) can map them onto
/// usage, data and numeric failure classes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Config(String),

    #[error("extent {extent} on axis {axis} is not divisible by {divisor}; pad the input")]
    NotDivisible {
        axis: usize,
        extent: usize,
        divisor: usize,
    },

    #[error("degenerate mask: both foreground and background voxels are required")]
    DegenerateMask,

    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("non-positive spacing {0:?}")]
    NonPositiveSpacing([f64; 3]),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error is a numerical failure (non-finite values) rather than bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
