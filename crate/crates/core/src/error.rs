use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing parameter (geometry, ranges, configuration).
    #[error("validation error: {0}")]
    Validation(String),

    /// Scatterer placed inside the array aperture.
    #[error("scatterer at r = {distance} m lies within the array aperture (radius {aperture} m)")]
    Degenerate { distance: f64, aperture: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("iteration diverged: {0}")]
    Divergence(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by invalid input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Degenerate { .. } | Error::Shape { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
