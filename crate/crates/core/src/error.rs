use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unstable matrix: spectral radius {spectral_radius} is not below {bound}")]
    Instability { spectral_radius: f64, bound: f64 },

    /// A matrix that must be inverted is numerically singular.
    #[error("ill-conditioned {what} at t = {t}: pivot {pivot:e} below threshold")]
    Conditioning { what: &'static str, t: usize, pivot: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("finite-difference step too large: perturbed {block} left the positive definite cone")]
    StepTooLarge { block: String },

    #[error("gradient block is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    InvalidGradient { min_eigenvalue: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid nominal distribution: {0}")]
    InvalidNominal(String),

    #[error("divergence oracle failed: {0}")]
    OracleFailure(String),

    /// An oracle failure annotated with the noise-term index it occurred at.
    #[error("oracle failed for noise term {z}: {source}")]
    OracleAt {
        z: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("initial covariance for noise term {z} is infeasible")]
    InvalidInit { z: usize },

    #[error("{what} did not converge within {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },

    /// A stabilizability or detectability certificate failed.
    #[error("{what} certificate failed: {detail}")]
    Certificate { what: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
