//! Copy-augmented Transformer for grammatical error correction, with its own
//! reverse-mode autodiff, denoising pretraining, beam search and edit-level
//! evaluation.

pub mod cli;
pub mod copy;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod noising;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
