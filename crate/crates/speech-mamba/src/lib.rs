//! Audio input, features, manifests, tokenization, training and decoding
//! drivers around `speech-mamba-core`.

pub mod audio;
pub mod bench;
pub mod config;
pub mod error;
pub mod fbank;
pub mod librispeech;
pub mod longcontext;
pub mod manifest;
pub mod resample;
pub mod synth;
pub mod tokenizer;
pub mod train;
pub mod transcripts;

pub use error::{Error, Result};
