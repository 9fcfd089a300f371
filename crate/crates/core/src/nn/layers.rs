use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{join, Ctx, Init, Module};
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Affine map `x W + b` with `W` stored `[in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) init.
    pub fn new(init: &mut Init, d_in: usize, d_out: usize, bias: bool) -> Linear {
        let bound = 1.0 / math::sqrt(d_in as f64);
        Linear {
            weight: init.uniform(&[d_in, d_out], bound),
            bias: bias.then(|| init.uniform(&[d_out], bound)),
        }
    }

    pub fn zeros(init: &mut Init, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            weight: init.constant(&[d_in, d_out], 0.0),
            bias: bias.then(|| init.constant(&[d_out], 0.0)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub struct RmsNorm {
    pub gain: Tensor,
    pub eps: f64,
}

impl RmsNorm {
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(init: &mut Init, d: usize) -> RmsNorm {
        RmsNorm {
            gain: init.constant(&[d], 1.0),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        rms_norm(x, &self.gain, self.eps)
    }
}

impl Module for RmsNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
    }
}

/// `gain_i * x_i / sqrt(mean_j x_j^2 + eps)` over the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| shape_err("rms_norm", x.shape(), gain.shape()))?;
    if gain.shape() != [d] {
        return Err(shape_err("rms_norm", x.shape(), gain.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("rms_norm eps must be > 0, got {eps}")));
    }
    let rows = x.numel() / d.max(1);
    let mut out = vec![0.0; x.numel()];
    let mut inv = vec![0.0; rows];
    {
        let xd = x.data();
        let gd = gain.data();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let s = 1.0 / math::sqrt(ms + eps);
            inv[r] = s;
            for j in 0..d {
                out[r * d + j] = gd[j] * row[j] * s;
            }
        }
    }
    let (x_t, g_t) = (x.clone(), gain.clone());
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone(), gain.clone()], move |g| {
        let xd = x_t.data();
        let gd = g_t.data();
        let mut gx = x_t.requires_grad().then(|| vec![0.0; xd.len()]);
        let mut gg = g_t.requires_grad().then(|| vec![0.0; d]);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let s = inv[r];
            if let Some(gg) = gg.as_mut() {
                for j in 0..d {
                    gg[j] += grow[j] * row[j] * s;
                }
            }
            if let Some(gx) = gx.as_mut() {
                let dot: f64 = (0..d).map(|j| grow[j] * gd[j] * row[j]).sum();
                let c = dot * s * s * s / d as f64;
                for j in 0..d {
                    gx[r * d + j] = grow[j] * gd[j] * s - row[j] * c;
                }
            }
        }
        vec![gx, gg]
    }))
}

/// Mean/variance normalization with gain and bias over the last axis.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, d: usize) -> LayerNorm {
        LayerNorm {
            gain: init.constant(&[d], 1.0),
            bias: init.constant(&[d], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let axis = x.rank().checked_sub(1).ok_or_else(|| shape_err("layer_norm", x.shape(), gain.shape()))?;
    let mean = x.mean_axis(axis, true)?;
    let centered = x.sub(&mean)?;
    let var = centered.square().mean_axis(axis, true)?;
    let normed = centered.div(&var.add_scalar(eps).sqrt())?;
    normed.mul(gain)?.add(bias)
}

/// Inverted dropout: identity in eval mode or when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    if !ctx.training() || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = ctx.keep_mask(x.numel(), p);
    x.mul_const(&mask)
}

/// `[V, d]` table gathered by `ids` (row-major `[batch, len]`) into `[batch, len, d]`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize], batch: usize, len: usize) -> Result<Tensor> {
    if ids.len() != batch * len {
        return Err(shape_err("embedding_lookup", &[batch, len], &[ids.len()]));
    }
    let d = table.dim(1);
    table.index_rows(ids)?.reshape(&[batch, len, d])
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(..)`.
pub fn sinusoidal_positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("positional encoding needs an even width, got {d}")));
    }
    let mut data: Vec<f64> = Vec::with_capacity(len * d);
    for t in 0..len {
        for i in 0..d / 2 {
            let freq = math::powf(10000.0, (2 * i) as f64 / d as f64);
            let angle = t as f64 / freq;
            data.push(math::sin(angle));
            data.push(math::cos(angle));
        }
    }
    Tensor::new(data, &[len, d])
}
