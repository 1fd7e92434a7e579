use thiserror::Error;

/// Errors produced by the clustering, loss and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is outside its allowed range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violates a domain invariant (non-finite values, negative mass, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// The computation broke down numerically.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Pruning removed every cluster: no cluster is hard-assigned in both views.
    #[error("pruning left no cluster shared by both views (k = {k})")]
    EmptyPrune { k: usize },

    /// A state transition was requested that the state cannot make.
    #[error("invalid state: {0}")]
    State(String),

    /// Binary file header does not start with the expected magic bytes.
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: String,
        found: String,
    },

    /// File declares a format version this build cannot read.
    #[error("unsupported version {found} at offset {offset} (supported: {supported})")]
    UnsupportedVersion { offset: u64, found: u32, supported: u32 },

    /// File ends before the declared header or payload is complete.
    #[error("truncated {what} at offset {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        offset: u64,
        expected: u64,
        found: u64,
    },

    /// File continues past the declared payload.
    #[error("trailing data at offset {offset}: {extra} bytes beyond declared payload")]
    TrailingData { offset: u64, extra: u64 },

    /// Text document (config, geometry sidecar, trace) could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::EmptyPrune { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
