use thiserror::Error;

#[derive(Debug, Error)]
pub enum SgError {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grids do not match: {0}")]
    MismatchedGrids(String),

    #[error("field sample undefined at node {node} inside the source support")]
    UndefinedSample { node: usize },

    #[error("optimal transport did not converge after {iterations} iterations (max mass error {max_error:.3e}, target {target:.3e})")]
    NonConvergence {
        iterations: usize,
        max_error: f64,
        target: f64,
    },

    #[error("Laguerre cell of particle {index} is empty")]
    DegenerateCell { index: usize },

    #[error("height field vanishes on the candidate cell of particle {index}")]
    ZeroMassRegion { index: usize },

    #[error("time {t} is not in the saved history")]
    TimeNotSaved { t: f64 },

    #[error("history too short: need at least {needed} saved times, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("Luxemburg bracket not found after {expansions} expansions")]
    BracketFailure { expansions: usize },

    #[error("{context}: {source}")]
    Step {
        context: String,
        #[source]
        source: Box<SgError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SgError {
    /// Wrap with a context string, keeping the original error as source.
    pub fn context(self, context: impl Into<String>) -> SgError {
        SgError::Step {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error beneath any context wrappers.
    pub fn root(&self) -> &SgError {
        match self {
            SgError::Step { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_nonconvergence(&self) -> bool {
        matches!(
            self.root(),
            SgError::NonConvergence { .. } | SgError::DegenerateCell { .. }
        )
    }
}

pub type Result<T, E = SgError> = std::result::Result<T, E>;
