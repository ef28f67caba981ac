//! Minimal dense-tensor engine with reverse-mode differentiation.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamState, DEFAULT_L2, DEFAULT_LR};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::max_relative_error;
pub use graph::{BatchStats, Gradients, Graph, NormMode, Var, BN_EPS};
pub use tensor::{gemm, gemm_at, gemm_bt, transpose, Scalar, Tensor};

#[cfg(test)]
mod tests;
