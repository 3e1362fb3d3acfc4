//! Lexical-aware non-autoregressive speech recognition at desk scale.

pub mod autograd;
pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
