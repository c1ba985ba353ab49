use thiserror::Error;

use crate::robustness::VerifyReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("matrix is not block-lower-triangular: block ({block_row}, {block_col}) has entry of magnitude {magnitude:e}")]
    NotBlockLowerTriangular {
        block_row: usize,
        block_col: usize,
        magnitude: f64,
    },

    #[error("{name} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { name: String, min_eigenvalue: f64 },

    #[error("invalid system specification: {0}")]
    InvalidSpec(String),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible: gain budget {budget} is below the minimum achievable gain {min_gain}")]
    Infeasible { budget: f64, min_gain: f64 },

    #[error("infeasible budget: gamma = {gamma} with epsilon = {epsilon:e} leaves gamma_eps = {gamma_eps} (reduce epsilon)")]
    InfeasibleBudget {
        gamma: f64,
        epsilon: f64,
        gamma_eps: f64,
    },

    #[error("causality violated at message {k}: {detail}")]
    CausalityViolation { k: usize, detail: String },

    #[error("L2-gain guarantee violated: achieved gain {} exceeds gamma {}", .0.achieved_gain, .0.gamma)]
    GuaranteeViolated(Box<VerifyReport>),

    #[error("guarantee preconditions not met: {0}")]
    PreconditionFailed(String),

    #[error("unknown rank heuristic '{0}'")]
    UnknownHeuristic(String),
}

impl Error {
    pub(crate) fn dims(context: &str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
