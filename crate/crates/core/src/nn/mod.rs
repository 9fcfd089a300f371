//! Neural primitives shared by the encoder and decoder stacks.

mod attention;
mod conv;
mod gradcheck;
mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{numel, Tensor};

pub use attention::{multi_head_attention, AttentionConfig, AttentionMask, MultiHeadAttention};
pub use conv::{causal_depthwise_conv1d, conv2d, conv2d_out_len};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use layers::{
    dropout, embedding_lookup, layer_norm, rms_norm, sinusoidal_positional_encoding, LayerNorm, Linear,
    RmsNorm,
};

/// Anything that owns trainable tensors.
pub trait Module {
    /// Calls `f` once per parameter with its canonical dotted name.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((String::from(name), t.clone())));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    /// Turns gradient tracking of every parameter on or off. Frozen
    /// modules run forward passes without recording a graph.
    fn set_trainable(&self, on: bool) {
        self.visit_params("", &mut |_, t| {
            t.set_requires_grad(on).expect("parameters are leaves");
        });
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Execution context: train/eval switch and the seeded generator used for
/// dropout masks.
pub struct Ctx {
    training: Cell<bool>,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn new(seed: u64) -> Ctx {
        Ctx {
            training: Cell::new(false),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn training(&self) -> bool {
        self.training.get()
    }

    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn reseed(&self, seed: u64) {
        *self.rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub(crate) fn keep_mask(&self, n: usize, p: f64) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        let keep = 1.0 / (1.0 - p);
        (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Init {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let data = (0..numel(shape)).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::parameter(data, shape).expect("shape matches data")
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..=hi)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        Tensor::parameter(alloc::vec![value; numel(shape)], shape).expect("shape matches data")
    }

    pub fn values(&mut self, shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::parameter(data, shape).expect("shape matches data")
    }
}
