use thiserror::Error;

/// Unified error type for the crate. Every fallible public API returns
/// [`Result`]; panics are reserved for internal invariant violations that
/// indicate a bug rather than bad input.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An index (row, token id, tensor id, ...) is out of bounds.
    #[error("{what} {index} out of bounds (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// A configured or derived size exceeds a hard capacity limit.
    #[error("{what} is {got}, exceeding the maximum of {max}")]
    Capacity {
        what: &'static str,
        got: usize,
        max: usize,
    },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// A forward operation produced NaN or infinity.
    #[error("non-finite value produced by {op}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    /// An API contract was violated by the caller (e.g. backward from a
    /// non-scalar node, or a loss over zero pairs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed checkpoint or vocabulary file. Carries the byte offset at
    /// which decoding failed so corrupt files can be diagnosed.
    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
