//! Minimal reverse-mode differentiable dense-array engine: arrays, a tape
//! with registered adjoints, Adam, gradient clipping, seedable rng streams
//! and checkpoint serialization.

pub mod array;
pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;

pub use array::Array;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Manifest};
pub use graph::{Graph, NodeId};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch { op: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite {what} in {name}")]
    NonFinite { what: String, name: String },
}
