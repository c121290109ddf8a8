//! Minimal reverse-mode differentiation substrate.
//!
//! Supplies exactly the primitives the rest of the crate composes: dense
//! linear algebra, 1-D convolution, batch/layer normalization, attention
//! building blocks, softmax family and the losses' fused cross-entropy, all
//! with registered adjoints and finite-difference verification support.

mod backward;
pub mod blocks;
mod check;
mod linalg;
mod tape;
mod tensor;

pub use check::{evaluate, evaluate_with_gradients, grad_check, BlockCheck, FD_STEP, GradCheckReport};
pub use tape::{BatchStats, DropoutKey, Gradients, Mode, NodeId, Tape};
pub use tensor::Tensor;
