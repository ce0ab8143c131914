use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unknown bus {0}")]
    UnknownBus(u64),

    #[error("more than one generator at bus {0}")]
    DuplicateGenerator(u64),

    #[error("network is not connected ({unreached} buses unreachable from bus {root})")]
    Disconnected { root: u64, unreached: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("reduced susceptance matrix is singular: {0}")]
    Singular(String),

    #[error("injections are not balanced: sum {sum:e} exceeds tolerance {tolerance:e}")]
    Unbalanced { sum: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("flow vector is not cycle consistent on line {line} (angle residual {residual:e})")]
    CycleInconsistent { line: usize, residual: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
