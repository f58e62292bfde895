//! Dense-tensor engine: values, reverse-mode differentiation graph,
//! Adam optimizer, and parameter checkpoints.

mod adam;
mod checkpoint;
mod graph;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamEntry, FORMAT_VERSION};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
