use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward needs a scalar objective, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),

    #[error("variable belongs to a different tape")]
    ForeignVariable,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state on path {path} at node {node}")]
    NonFiniteState { path: usize, node: usize },

    #[error("non-finite loss term at interval {interval}")]
    NonFiniteLoss { interval: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("training aborted at iteration {iteration}: {reason}; loss breakdown: {breakdown}")]
    TrainingAborted { iteration: usize, reason: String, breakdown: String },

    #[error("problem `{0}` has no exact solution")]
    MissingExactSolution(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteGradient
                | Error::TrainingAborted { .. }
        )
    }
}
