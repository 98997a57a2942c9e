use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operator is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    /// The drive sits too close to the |0⟩↔|+1⟩ manifold for the two-level
    /// rotating-wave description to hold.
    #[error("rotating-wave approximation invalid: drive at {drive:.4} MHz is {distance:.4} MHz from the |0>-|+1> line, need at least {required:.4} MHz")]
    RwaViolation {
        drive: f64,
        distance: f64,
        required: f64,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("fit failed: {0}")]
    Fit(String),
}

impl Error {
    /// True for errors that originate in the physics model rather than in
    /// malformed input or a failed fit.
    pub fn is_physics(&self) -> bool {
        matches!(
            self,
            Error::RwaViolation { .. } | Error::Calibration(_) | Error::NotHermitian { .. }
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
