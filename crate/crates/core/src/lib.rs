//! Multi-granularity visual tokens for a toy vision-language model.
//!
//! The crate builds three kinds of visual tokens from an image — one global
//! summary token, a pooled grid of local patch tokens, and one token per
//! object mask recovered by gradient-based query inversion against a frozen
//! encoder — then feeds them through a small autoregressive decoder. Token
//! budgets can be cut at inference time (pooling locals harder, pruning
//! object tokens) without retraining, which is the point of the exercise.

pub mod encoder;
pub mod error;
pub mod inversion;
pub mod masks;
pub mod numerics;
pub mod scene;
pub mod tokens;
pub mod vlm;
pub mod wire;

pub use error::{Error, Result};
