//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records primitives as they are evaluated; [`Graph::backward`]
//! walks the record in reverse creation order. Weights live in [`Tensor`]s
//! outside the graph and are bound as leaves for each step, then updated by
//! [`adam_step`].

mod adam;
pub mod check;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId, Primitive, BCE_CLAMP};
pub use params::ParamSet;
pub use scalar::{Real, Scalar};
pub use tensor::Tensor;

/// Explicitly seeded counter-based generator used for every random draw.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not attached to this graph")]
    Detached(usize),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("optimizer state mismatch: {0}")]
    StateMismatch(String),
}
