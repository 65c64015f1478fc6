//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a classic tape: forward operations on [`Val`] handles record
//! nodes on a [`Tape`]; [`Tape::backward`] replays the tape once in reverse
//! creation order (which is a reverse topological order) and accumulates
//! gradients. Production code runs in `f32`; gradient checks instantiate the
//! same code with `f64` for headroom.

mod scalar;
mod tensor;
mod tape;
mod ops;
pub mod nn;
pub mod optim;
pub mod gradcheck;

pub use ops::{concat, embedding, hann_window};
pub use scalar::Scalar;
pub use tape::{GradMap, Tape, Val};
pub use tensor::Tensor;
