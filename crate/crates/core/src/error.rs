use thiserror::Error;

/// Errors surfaced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("non-finite relevance in layer `{layer}` ({rule} rule, zero denominator)")]
    NonFiniteRelevance { layer: String, rule: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error("component kind `{0}` not present in graph")]
    MissingComponentKind(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("search failed: {0}")]
    Search(String),

    #[error("fixture training did not reach {target:.2} accuracy (got {achieved:.3})")]
    Training { target: f64, achieved: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
