//! Desk-scale neural entropy estimation.
//!
//! Tiny causal, autoencoder and entropy estimation models over transformer
//! and masked-mixer backbones, exact bits-per-byte accounting, per-token
//! entropy estimates, and a bit-exact range codec driven by model
//! predictions.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod audit;
pub mod cli;
pub mod codec;
pub mod corpus;
pub mod entropy;
pub mod error;
pub mod model;
pub mod tokenizer;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
