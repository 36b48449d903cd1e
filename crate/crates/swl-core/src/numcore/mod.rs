//! Minimal differentiable-computation substrate: dense f64 arrays, a static
//! computation graph with the primitives the model needs, reverse-mode
//! gradients, a finite-difference checker, and bias-corrected Adam.

pub mod array;
pub mod checkpoint;
pub mod exec;
pub mod graph;
pub mod params;

pub use array::Array;
pub use exec::{dump_op_time as exec_dump_op_time, finite_diff_check, Executor, Gradients, Inputs};
pub use graph::{Graph, NodeId, SliceDim};
pub use params::{AdamState, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },
    #[error("{0}")]
    Invalid(String),
}
