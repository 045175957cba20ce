use thiserror::Error;

/// Library-wide error type.
///
/// Variants map onto the failure classes the public contracts promise:
/// invalid inputs, regime restrictions (e.g. the mean flow needs p > d),
/// rough fields refused by the high-order reference integrator, capacity
/// limits of the exact transport solver, and iterative non-convergence
/// carrying partial results.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    /// The field's spatial gradient is not uniformly Lipschitz; callers must
    /// fall back to self-convergence references.
    #[error("rough field refused: {0}")]
    RoughField(String),

    /// Zero-mass cell in density-mode sampling; the caller must assign the
    /// cell zero weight instead of an atom.
    #[error("cell {cell} carries zero mass; no representative can be drawn")]
    EmptyCell { cell: usize },

    /// Instance too large for the exact solver; the entropic fallback applies.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Iteration budget exhausted; `partial_cost` and `violation` describe the
    /// best iterate reached.
    #[error(
        "no convergence after {iterations} iterations \
         (marginal violation {violation:.3e}, partial cost {partial_cost:.6e})"
    )]
    NotConverged {
        iterations: usize,
        violation: f64,
        partial_cost: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code used by the CLI: 2 for configuration errors,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
