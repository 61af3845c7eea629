use alloc::string::String;

use crate::expr::{EvalError, ParseError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("function has signature {found}, expected {expected}")]
    Signature {
        expected: crate::expr::Signature,
        found: crate::expr::Signature,
    },
    #[error("evaluation error at probe point (t={t}, y={y}, z={z}): {source}")]
    Probe { t: f64, y: f64, z: f64, source: EvalError },
    #[error("evaluation error at node {node}: {source}")]
    Eval { node: usize, source: EvalError },
    #[error("picard iteration did not converge at node {node} after {iterations} iterations (last step {last_step:e})")]
    Picard {
        node: usize,
        iterations: u32,
        last_step: f64,
    },
    #[error("stability error: {0}")]
    Stability(String),
    #[error("infeasible constraint at node {node}: {reason}")]
    Infeasible { node: usize, reason: String },
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },
}
