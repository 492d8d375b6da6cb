use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A 3D point or ray is not covered by the lens field of view.
    #[error("out of field: {0}")]
    OutOfField(String),

    /// Lens parameters violate a model invariant.
    #[error("invalid lens: {0}")]
    InvalidLens(String),

    /// Shapes, sizes or configurations that do not fit together.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinite values where finite numbers are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed input text or file.
    #[error("parse error: {0}")]
    Parse(String),

    /// Item ids referenced by a manifest but absent from an input.
    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
