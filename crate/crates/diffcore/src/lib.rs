//! Reverse-mode differentiation over small dense `f64` arrays.
//!
//! A [`Tape`] records every primitive operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns the adjoint of every node that the root depends on.

mod array;
mod error;
mod gru;
mod tape;

pub use array::Array;
pub use error::DiffError;
pub use gru::{gru_cell, GruParams};
pub use tape::{Gradients, Tape, Var};
