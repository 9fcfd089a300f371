//! Core of a selective state-space (Mamba) speech recogniser.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a dense `f64` tensor with reverse-mode differentiation, the
//! neural primitives built on it, the selective scan, the encoder/decoder
//! model, the joint CTC + cross-entropy objective, decoding and scoring, the
//! optimizer and the checkpoint container format.
//!
//! File formats, audio, feature extraction and the command line live in the
//! `speech-mamba` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod decode;
pub mod error;
pub mod math;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ssm;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Token id reserved for the CTC blank; also used as decoder padding.
pub const BLANK_ID: usize = 0;
/// Start-of-sequence token fed to the decoder.
pub const BOS_ID: usize = 1;
/// End-of-sequence token appended to decoder targets.
pub const EOS_ID: usize = 2;
/// First id available to ordinary output symbols.
pub const FIRST_LABEL_ID: usize = 3;
