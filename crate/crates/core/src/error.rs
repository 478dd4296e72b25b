use thiserror::Error;

use crate::fredholm::SolveDiagnostics;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("malformed input at row {row}: {msg}")]
    Malformed { row: usize, msg: String },

    #[error("inconsistent sample: {0}")]
    Consistency(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel denominator {denominator:e} below floor at query {query:?}")]
    DegenerateQuery { query: Vec<f64>, denominator: f64 },

    #[error("quadrature truncation: conditional density mass {mass:.6} on [{a}, {b}] is below {floor}")]
    Truncation { mass: f64, a: f64, b: f64, floor: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("Landweber solver diverged after {} iterations (relative change {:e})", .0.iterations, .0.final_rel_change)]
    Divergence(SolveDiagnostics),

    #[error("no sign change of the estimating function on [{lo}, {hi}]")]
    Bracket { lo: f64, hi: f64 },

    #[error("{failed} of {total} replicates failed (limit 5%); first error: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },

    #[error("outcome is absent for unit {0}")]
    AbsentOutcome(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
