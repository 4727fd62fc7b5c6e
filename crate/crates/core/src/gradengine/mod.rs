//! Dense reverse-mode differentiation for the small networks in this crate.
//!
//! A [`Tape`] records primitive operations on row-major [`Tensor`]s during a
//! forward pass; [`Tape::backward`] then runs one reverse sweep and returns
//! the gradient of a scalar loss with respect to every leaf that asked for
//! one. Trainable weights live in a [`ParamStore`], which binds them onto a
//! tape, accumulates their gradients and applies AdamW updates.

mod params;
mod tape;
mod tensor;

pub use params::{AdamW, Checkpoint, ParamRecord, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;
