//! Reverse-mode differentiation core over dense real arrays: define-by-run
//! graph, AdamW, EMA tracking, schedules, and finite-difference certification.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Gradients, NodeId};
pub use optim::{adamw_step, ema_update, global_grad_norm, tau_schedule, AdamConfig, AdamState, TauKind};
pub use params::{EmaState, ParamStore};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: String, got: Vec<usize> },
    #[error("index {index} out of bounds for table with {rows} rows")]
    IndexOutOfBounds { index: usize, rows: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown schedule kind {0}")]
    UnknownSchedule(String),
    #[error("parameter stores disagree at {0}")]
    ParamMismatch(String),
}
