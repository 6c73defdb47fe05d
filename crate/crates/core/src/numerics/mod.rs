//! Dense `f64` matrices, a reverse-mode tape, Adam, finite-difference
//! checking and the shared checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionSlots, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use sparse::SparseMatrix;
pub use tensor::Tensor2;
