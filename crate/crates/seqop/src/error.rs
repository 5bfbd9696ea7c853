//! Error taxonomy shared by every module.
//!
//! Numerical operations return `Result<_, Error>`; shape bugs inside the
//! crate panic instead (they are programmer errors, not data errors).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input carries NaN/Inf or violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operand dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeError(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Materialization request exceeds the desk-scale guard.
    #[error("capacity exceeded: n = {n} > limit {limit}")]
    CapacityError { n: usize, limit: usize },

    /// Jacobian requested for j > i on a causal map.
    #[error("position order violated: j = {j} > i = {i}")]
    OrderError { i: usize, j: usize },

    /// Synthesis asked for fewer heads than the interaction rank.
    #[error("insufficient heads: H = {given} < interaction rank k = {required}")]
    InsufficientHeads { required: usize, given: usize },

    /// Transition matrix is (numerically) defective; modal features need a
    /// full eigenbasis.
    #[error("defective transition matrix: eigenvector condition {condition:.3e} exceeds 1e8")]
    DefectiveTransition { condition: f64 },

    /// Transition matrix has a (numerically) zero eigenvalue; inverse powers
    /// are undefined.
    #[error("singular transition matrix: |lambda| = {magnitude:.3e} below zero threshold")]
    SingularTransition { magnitude: f64 },

    /// Eigenvalue magnitude outside the representable feature range.
    #[error("conditioning guard: |lambda| = {magnitude:.3e} outside [{min:.3e}, {max:.3e}]")]
    ConditioningError { magnitude: f64, min: f64, max: f64 },

    /// No probe direction u gives W_K^T W_Q u != 0.
    #[error("degenerate projection: W_K^T W_Q u vanished for every probe u")]
    DegenerateProjection,

    /// Training loss exceeded the divergence guard.
    #[error("training diverged at step {step}: loss = {loss:.3e}")]
    Diverged { step: usize, loss: f64 },

    /// Teacher builder produced a family whose certified rank differs from
    /// the requested one.
    #[error("teacher rank mismatch: requested k = {expected}, certified rank = {actual}")]
    RankMismatch { expected: usize, actual: usize },

    /// Plot requested with no data series.
    #[error("empty plot: no series supplied")]
    EmptyPlot,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
