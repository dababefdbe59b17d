//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("fully masked row {row} in {op}")]
    FullyMaskedRow { op: &'static str, row: usize },

    #[error("target index {index} out of range for {classes} classes")]
    InvalidTarget { index: usize, classes: usize },

    #[error("Cholesky factorization failed{}", if *jittered { " after max jitter escalation" } else { "" })]
    Cholesky { jittered: bool },

    #[error("positivity assumption violated: p(R_{feature}=1 | conditioning set) = 0")]
    PositivityViolation { feature: usize },

    #[error("zero-probability conditioning assignment")]
    ZeroProbabilityConditioning,

    #[error("no acquirable feature remains for query {query}")]
    NoCandidates { query: usize },

    #[error("joint table too large: {cells} cells (limit {limit})")]
    TableTooLarge { cells: usize, limit: usize },

    #[error("bisection failed to reach prevalence target {target}")]
    BisectionFailed { target: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint config hash mismatch: expected {expected}, found {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
