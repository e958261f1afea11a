//! Dense tensors, seeded randomness and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
pub mod rng;
mod tensor;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, BlockReport, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use params::{ParamId, ParamSet};
pub use rng::SeededRng;
pub use tensor::{fans, Fill, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid shape {0:?}: extents must be non-empty and >= 1")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
