use thiserror::Error;

/// Errors raised by the measure, calculus, simulation and solver layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MvmError {
    #[error("non-finite value {value} when evaluating {label} at atom {atom}")]
    Evaluation { label: String, atom: usize, value: f64 },
    #[error("support misalignment: expected {expected} values on support {support_id}, got {got} on support {got_id}")]
    Alignment {
        expected: usize,
        got: usize,
        support_id: u64,
        got_id: u64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("operation only supports dimension 1, got {0}")]
    UnsupportedDimension(usize),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure at step {step}: every weight was clamped to zero")]
    NumericalFailure { step: usize },
    #[error("exponential overflow at t = {time}; try a smaller horizon or a centered control")]
    Overflow { time: f64 },
    #[error("every control is infeasible at node {node:?}")]
    Infeasible { node: Vec<f64> },
    #[error("resource guard: {0}")]
    ResourceLimit(String),
    #[error("unknown validation suite `{0}`")]
    UnknownSuite(String),
}

pub type Result<T> = std::result::Result<T, MvmError>;
