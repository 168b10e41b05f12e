//! Fixed-graph reverse-mode differentiation over dense `f64` arrays.
//!
//! Only the primitives the coordinate network, the encoder and the cellular
//! automaton need are provided. A [`Tape`] records one forward evaluation;
//! [`Tape::backward`] accumulates parameter gradients into a [`ParamStore`].

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, gradient_check, GradCheck, GradCheckReport, ParamDeviation};
pub use params::{ParamEntry, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Activation, BinaryOp, Bound, NodeId, Tape};
pub use tensor::Tensor;
