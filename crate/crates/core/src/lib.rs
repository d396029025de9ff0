//! Attention-based neural machine translation built from first principles:
//! a reverse-mode differentiation tape, stacked LSTMs, global and local
//! attention with input feeding, SGD training, greedy and forced decoding,
//! and BLEU / AER evaluation.

pub mod attention;
pub mod container;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod lstm;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{NmtError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
