use thiserror::Error;

use crate::model::TaskId;

/// Failures surfaced by policy and evaluator backends.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(String),
    #[error("adaptation needs at least one rollout")]
    EmptyRollouts,
    #[error("rollout for task {0} has no evaluated outcome")]
    UnevaluatedRollout(TaskId),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Failures of the statistical routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("input is constant; rank correlation undefined")]
    ConstantInput,
    #[error("control variable is perfectly correlated with an input")]
    DegenerateControl,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("scoring failed: {0}")]
    Scoring(#[from] GatewayError),
}
