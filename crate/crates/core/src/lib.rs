//! Function-preserving growth of transformer models.
//!
//! The crate contains a small, exact `f64` transformer ([`model`]), six
//! expansion transformations that enlarge one architecture dimension while
//! leaving the computed function unchanged ([`transforms`]), tools to check
//! that numerically ([`verify`]), hand-written gradients ([`autograd`]), a toy
//! training loop that can expand mid-run ([`train`]), and a binary checkpoint
//! format ([`checkpoint`]).

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod model;
pub mod plan;
pub mod tensor;
pub mod train;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Activation, Model, ModelConfig, ModelParams};
pub use tensor::{Matrix, Prng};
pub use transforms::{InitPolicy, TransformKind, TransformSpec};
