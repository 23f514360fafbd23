//! Dense tensors, a define-then-run computation record with reverse-mode
//! differentiation, and Adam.

mod graph;
mod optim;
mod tensor;

pub use graph::{Feed, Gradients, Graph, NodeId};
pub use optim::{AdamConfig, AdamState, ParamStore};
pub use tensor::{Element, Tensor, BLOB_MAGIC};
