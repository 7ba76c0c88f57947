use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),

    #[error("invalid environment law: {0}")]
    InvalidLaw(String),

    #[error("unsupported law family for this operation: {0}")]
    UnsupportedFamily(String),

    #[error("invalid shift {shift}: weight leaves [0,1] at support point {point}")]
    InvalidShift { shift: f64, point: String },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("site {0:?} is not on the outer boundary of the region")]
    NotOnBoundary(Vec<i64>),

    #[error("region has no frontal side")]
    NoFrontalSide,

    #[error("site {0:?} is not an interior site of the region")]
    NotInterior(Vec<i64>),

    #[error("solver did not converge after {iterations} sweeps (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("walk exceeded its step budget of {0}")]
    StepBudgetExceeded(u64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("problem too large: {0}")]
    Size(String),

    #[error("{source} (replay with environment seed {seed:#018x})")]
    WithSeed { seed: u64, source: Box<Error> },
}

impl Error {
    pub(crate) fn with_seed(self, seed: u64) -> Error {
        match self {
            e @ Error::WithSeed { .. } => e,
            e => Error::WithSeed {
                seed,
                source: Box::new(e),
            },
        }
    }
}
