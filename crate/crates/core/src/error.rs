use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("singular matrix (pivot magnitude {pivot:.3e})")]
    SingularMatrix { pivot: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("initial gain does not stabilize the plant")]
    NotStabilizing,

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("decay rates must be strictly positive, got {0}")]
    InvalidGamma(f64),

    #[error("virtual input must be nonnegative, got {0}")]
    NegativeMu(f64),

    #[error("barrier constraint does not depend on the input (|L_g L_f^(r-1) h| = {norm:.3e})")]
    DegenerateConstraint { norm: f64 },

    #[error("quadratic program is infeasible")]
    Infeasible,

    #[error("output has no relative degree up to the state dimension")]
    NoRelativeDegree,

    #[error("no internal coordinates complete the output map to a nonsingular chart")]
    SingularCoordinates,

    #[error("input columns are linearly dependent (rank {rank} < {cols})")]
    DependentColumns { rank: usize, cols: usize },

    #[error("certificate constants must be positive: {0}")]
    InvalidCertificate(String),

    #[error("state left the admissible region at t = {t}: {reason}")]
    GuardViolated { t: f64, reason: String },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
