//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by panel construction, estimation, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// Two inputs that must agree in shape do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    /// A precondition on the inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An overlap-weight denominator requires columns (s, t) to share at
    /// least one observed unit, and they do not.
    #[error("columns {s} and {t} are never jointly observed")]
    ZeroOverlap { s: usize, t: usize },

    /// Requested factor rank exceeds what the panel can support.
    #[error("rank {rank} exceeds maximum {max}")]
    RankTooLarge { rank: usize, max: usize },

    /// Rank selection needs at least one positive eigenvalue.
    #[error("all eigenvalues are zero or negative")]
    AllZeroSpectrum,

    /// A regression Gram matrix is numerically singular.
    #[error("singular Gram matrix (condition number {cond:.3e})")]
    SingularGram { cond: f64 },

    /// The penalized spline system could not be factored.
    #[error("singular spline system")]
    SingularSystem,

    /// The series is too short for the requested operation.
    #[error("series too short: {0}")]
    TooShort(String),

    /// The simultaneous-adoption pattern needs per-unit auxiliary values.
    #[error("pattern requires per-unit auxiliary values but none were given")]
    MissingAux,

    /// The unit's loading regression was degenerate, so no forecast or
    /// interval can be produced for it.
    #[error("unit {unit} has a degenerate loading fit")]
    DegenerateUnit { unit: usize },

    /// Asymptotic inference is available for first-order dynamics only.
    #[error("inference supports VAR order 1, got order {order}")]
    UnsupportedOrder { order: usize },

    /// The configured generative process is not stable.
    #[error("unstable data-generating process (spectral radius {rho:.4})")]
    UnstableDgp { rho: f64 },

    /// The signed-rank test needs at least five nonzero differences.
    #[error("too few nonzero differences for signed-rank test: {n}")]
    TooFewSamples { n: usize },

    /// Relative error needs at least one positive actual.
    #[error("no positive actuals for relative error")]
    NoPositiveActuals,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse classification used by the command-line front end to pick
    /// exit codes: 1 validation, 2 numerical, 3 i/o.
    pub fn exit_class(&self) -> u8 {
        match self {
            Error::DimensionMismatch { .. }
            | Error::InvalidInput(_)
            | Error::RankTooLarge { .. }
            | Error::TooShort(_)
            | Error::MissingAux
            | Error::UnsupportedOrder { .. }
            | Error::UnstableDgp { .. }
            | Error::TooFewSamples { .. }
            | Error::NoPositiveActuals => 1,
            Error::ZeroOverlap { .. }
            | Error::AllZeroSpectrum
            | Error::SingularGram { .. }
            | Error::SingularSystem
            | Error::DegenerateUnit { .. } => 2,
            Error::Io(_) | Error::Csv(_) => 3,
        }
    }
}
