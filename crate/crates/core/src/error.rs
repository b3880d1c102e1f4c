use thiserror::Error;

/// Errors produced anywhere in the selection pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("singular geometry: target-agent range {range:.3e} m below {min:.0e} m")]
    SingularGeometry { range: f64, min: f64 },

    #[error("target behind camera: depth {depth:.3e} m below {min:.0e} m")]
    BehindCamera { depth: f64, min: f64 },

    #[error("atom {0} already selected")]
    DuplicateAtom(usize),

    #[error("oracle refused: {combinations} combinations exceed the limit of {limit}")]
    OracleGuard { combinations: f64, limit: f64 },

    #[error("estimation failed: {0}")]
    Convergence(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl Error {
    /// True for errors caused by the measurement geometry at a given parameter value.
    pub fn is_geometry(&self) -> bool {
        matches!(self, Error::SingularGeometry { .. } | Error::BehindCamera { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
