//! Minimal tensor engine: dense 5-D tensors, convolution kernels and a
//! reverse-mode tape.

pub mod conv;
pub mod ops;
mod shifted;
pub mod tape;
pub mod tensor;

pub use conv::ConvGeom;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Dims, Tensor};
