//! Tensor arithmetic, reverse-mode differentiation and the `GLTD` file format.

pub mod gltd;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, norm, softmax_rows, Tensor};
