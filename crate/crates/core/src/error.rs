use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum FflError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("agent {agent} has an empty dataset")]
    EmptyDataset { agent: usize },

    #[error("agent {agent}, point {index}: non-finite feature or label")]
    UnboundedFeatures { agent: usize, index: usize },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: f64, num_classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite iterate in {phase} at round {round}")]
    Divergence { phase: String, round: usize },

    #[error(
        "gradient bound violated in {phase} round {round}: agent {agent} has ||grad|| = {norm} > L_f = {bound}"
    )]
    GradientBound {
        phase: String,
        round: usize,
        agent: usize,
        norm: f64,
        bound: f64,
    },

    #[error("{what} did not converge within {cap} iterations")]
    IterationCap { what: String, cap: usize },

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error("singular linear system")]
    Singular,

    #[error("cluster {cluster} covers every agent; its complement is empty")]
    EmptyComplement { cluster: usize },

    #[error("agent sets differ: run has {run} agents, oracle has {oracle}")]
    AgentSetMismatch { run: usize, oracle: usize },

    #[error("scenario has no known generating distributions")]
    UnknownDistributions,

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("idx format: {0}")]
    Idx(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FflError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FflError {
    FflError::InvalidParameter(msg.into())
}
