//! Dense tensors with a dynamic reverse-mode tape.

mod tape;
mod value;

pub use tape::{sigmoid, Gradients, Tape, Var, MASK_VALUE};
pub use value::{numel, Tensor};
