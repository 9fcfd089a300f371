use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::nn::{conv2d, conv2d_out_len, dropout, join, sinusoidal_positional_encoding, Ctx, Init, Linear, Module};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Time subsampling of the front-end.
pub const SUBSAMPLE: usize = STRIDE * STRIDE;

/// Valid frames after one stride-2 convolution.
pub fn conv_len(len: usize) -> usize {
    conv2d_out_len(len, KERNEL, STRIDE, PAD)
}

/// Valid frames after both convolutions.
pub fn subsampled_len(len: usize) -> usize {
    conv_len(conv_len(len))
}

/// Two 3x3 stride-2 convolutions over (time, frequency), SiLU after each,
/// a linear map of the flattened channels x frequencies to `d_model` and an
/// optional sinusoidal position code.
///
/// Frames past an utterance's valid length are zeroed after every
/// convolution, so outputs never depend on padding or batch composition.
pub struct Frontend {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub proj: Linear,
    pub feature_dim: usize,
    pub pos_enc: bool,
    pub dropout_p: f64,
}

impl Frontend {
    pub fn new(
        init: &mut Init,
        feature_dim: usize,
        channels: (usize, usize),
        d_model: usize,
        pos_enc: bool,
        dropout_p: f64,
    ) -> Frontend {
        let (c1, c2) = channels;
        let b1 = 1.0 / math::sqrt((KERNEL * KERNEL) as f64);
        let b2 = 1.0 / math::sqrt((c1 * KERNEL * KERNEL) as f64);
        let freq = conv_len(conv_len(feature_dim));
        Frontend {
            conv1_w: init.uniform(&[c1, 1, KERNEL, KERNEL], b1),
            conv1_b: init.uniform(&[c1], b1),
            conv2_w: init.uniform(&[c2, c1, KERNEL, KERNEL], b2),
            conv2_b: init.uniform(&[c2], b2),
            proj: Linear::new(init, c2 * freq, d_model, true),
            feature_dim,
            pos_enc,
            dropout_p,
        }
    }

    /// `features: [B, T, F]` with per-utterance valid lengths. Returns
    /// `[B, T', d_model]` and the subsampled lengths.
    pub fn forward(&self, features: &Tensor, lens: &[usize], ctx: &Ctx) -> Result<(Tensor, Vec<usize>)> {
        if features.rank() != 3 || features.dim(2) != self.feature_dim || lens.len() != features.dim(0) {
            return Err(shape_err("frontend", features.shape(), &[lens.len(), 0, self.feature_dim]));
        }
        let (b, t, f) = (features.dim(0), features.dim(1), features.dim(2));
        if t < SUBSAMPLE {
            return Err(Error::InvalidArgument(format!(
                "{t} input frames is too short for {SUBSAMPLE}x subsampling"
            )));
        }
        if let Some(&bad) = lens.iter().find(|&&l| l == 0 || l > t) {
            return Err(Error::InvalidArgument(format!("utterance length {bad} outside 1..={t}")));
        }
        let x = masked(&features.reshape(&[b, 1, t, f])?, lens)?;
        let h = conv2d(&x, &self.conv1_w, &self.conv1_b, STRIDE, PAD)?.silu();
        let lens1: Vec<usize> = lens.iter().map(|&l| conv_len(l)).collect();
        let h = masked(&h, &lens1)?;
        let h = conv2d(&h, &self.conv2_w, &self.conv2_b, STRIDE, PAD)?.silu();
        let lens2: Vec<usize> = lens1.iter().map(|&l| conv_len(l)).collect();
        let h = masked(&h, &lens2)?;
        let (c, t2, f2) = (h.dim(1), h.dim(2), h.dim(3));
        let h = h.permute(&[0, 2, 1, 3])?.reshape(&[b, t2, c * f2])?;
        let mut y = self.proj.forward(&h)?;
        if self.pos_enc {
            y = y.add(&sinusoidal_positional_encoding(t2, self.proj.d_out())?)?;
        }
        Ok((dropout(&y, self.dropout_p, ctx)?, lens2))
    }
}

/// Zeroes time steps `>= lens[b]` of a `[B, C, T, F]` tensor.
fn masked(x: &Tensor, lens: &[usize]) -> Result<Tensor> {
    let (b, c, t, f) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if lens.iter().all(|&l| l >= t) {
        return Ok(x.clone());
    }
    let mut mask = vec![0.0; b * c * t * f];
    for (bi, &l) in lens.iter().enumerate() {
        for ci in 0..c {
            let base = (bi * c + ci) * t * f;
            mask[base..base + l.min(t) * f].iter_mut().for_each(|m| *m = 1.0);
        }
    }
    x.mul_const(&mask)
}

impl Module for Frontend {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "conv1.weight"), &self.conv1_w);
        f(&join(prefix, "conv1.bias"), &self.conv1_b);
        f(&join(prefix, "conv2.weight"), &self.conv2_w);
        f(&join(prefix, "conv2.bias"), &self.conv2_b);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}
