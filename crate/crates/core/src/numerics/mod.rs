//! Minimal dense-tensor core: matrices, a reverse-mode tape, the handful of
//! layers the predictor needs, diagonal Gaussians, optimizers and a
//! finite-difference gradient checker.

mod gaussian;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use gaussian::{gaussian_kl, reparameterize, GaussianParams, GaussianVars};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, Var, BCE_EPS, LEAKY_SLOPE};
pub use layers::{attention, gru_sequence, gru_step, GruParams, GruVars};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{
    ParamCheckpoint, ParamId, ParamStore, Parameter, StoredTensor, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use tensor::{sigmoid, Tensor};

/// Incompatible operand shapes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{op}: incompatible shapes {left:?} and {right:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub left: [usize; 2],
    pub right: [usize; 2],
}

impl ShapeError {
    pub fn new(op: &'static str, left: [usize; 2], right: [usize; 2]) -> Self {
        Self { op, left, right }
    }
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    cosine_from_parts(dot, na, nb)
}

/// `dot / sqrt(|a|^2 |b|^2)`, clamped to `[-1, 1]`; `None` when either norm is zero.
pub fn cosine_from_parts(dot: f64, norm_a_sq: f64, norm_b_sq: f64) -> Option<f64> {
    (norm_a_sq > 0.0 && norm_b_sq > 0.0).then(|| (dot / (norm_a_sq * norm_b_sq).sqrt()).clamp(-1.0, 1.0))
}
