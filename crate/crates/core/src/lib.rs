//! Temporal convolutional attention network (TCAN) for language modeling,
//! built on a small tape-based reverse-mode differentiation engine.

pub mod data;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, MaskMode, Tape, Var};
pub use tensor::{Init, Tensor};
