//! Self-enhanced prompt tuning on a miniature frozen dual encoder.
//!
//! The crate holds a small reverse-mode autodiff engine, the dual-encoder
//! backbone, the prompt fusion mechanism, its losses, a tuning loop, synthetic
//! benchmarks and the evaluation protocols built on them.

#[macro_use]
mod macros;

pub mod autodiff;
pub mod backbone;
mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod objectives;
pub mod tensor;
pub mod sep;
pub mod training;

pub use autodiff::{Tape, Var};
pub use backbone::{Backbone, BackboneConfig, BackboneParams, TokenSequence};
pub use error::{Error, Result};
pub use tensor::Tensor;
