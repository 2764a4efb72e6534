//! Dense tensors and a reverse-mode gradient tape.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`]
//! then sweeps the tape once in reverse. Learnable tensors live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`], which lets many
//! independent tapes share one set of read-only parameters.

mod params;
mod tape;
mod tensor;

pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var, BCE_EPS, LN_EPS};
pub use tensor::Tensor;
