use nalgebra::DVector;
use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("planning failure: {0}")]
    Planning(String),

    #[error("near-uncontrollable Gramian: smallest eigenvalue {min_eigenvalue:.3e}")]
    NearUncontrollable {
        min_eigenvalue: f64,
        eigenvector: DVector<f64>,
    },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
