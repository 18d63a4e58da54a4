//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The [`Tape`] records ops in topological order during the forward pass and
//! replays them once in reverse to accumulate gradients. Everything is 64-bit
//! and single-threaded per tape; the matmul kernels fan out over rows with a
//! fixed per-cell accumulation order, so results are bit-identical regardless
//! of thread count.

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Grads, Op, Tape, Var};
pub use tensor::Tensor;
