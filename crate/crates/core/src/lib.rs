//! Numerical core of a joint-vector cross-modal fusion network for emotion
//! recognition in conversation.
//!
//! Everything here is pure computation over `alloc` buffers: a small
//! reverse-mode tape, transformer encoder layers, Adam, a finite-difference
//! gradient checker, the mel-spectrogram frontend, the text frontend, the
//! joint-based fusion blocks, the classification and contrastive objectives
//! and the evaluation metrics. File IO, the CLI and the training harness live
//! in the `jferc` crate.

#![no_std]

extern crate alloc;

mod error;
mod math;

pub mod audio;
pub mod checkpoint;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
