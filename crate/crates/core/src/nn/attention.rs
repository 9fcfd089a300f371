use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{dropout, join, Ctx, Init, Linear, Module};
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub dropout_p: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            model_dim: 512,
            num_heads: 8,
            dropout_p: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1]", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Which keys each query may attend to, `[batch, q_len, k_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_dense(batch: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<AttentionMask> {
        if allowed.len() != batch * q_len * k_len {
            return Err(shape_err("attention mask", &[batch, q_len, k_len], &[allowed.len()]));
        }
        Ok(AttentionMask {
            batch,
            q_len,
            k_len,
            allowed,
        })
    }

    /// Keys at positions `>= key_lens[b]` are padding.
    pub fn from_key_lengths(key_lens: &[usize], q_len: usize, k_len: usize) -> AttentionMask {
        let batch = key_lens.len();
        let mut allowed = Vec::with_capacity(batch * q_len * k_len);
        for &len in key_lens {
            for _ in 0..q_len {
                allowed.extend((0..k_len).map(|k| k < len));
            }
        }
        AttentionMask {
            batch,
            q_len,
            k_len,
            allowed,
        }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(batch: usize, len: usize) -> AttentionMask {
        let mut allowed = Vec::with_capacity(batch * len * len);
        for _ in 0..batch {
            for q in 0..len {
                allowed.extend((0..len).map(|k| k <= q));
            }
        }
        AttentionMask {
            batch,
            q_len: len,
            k_len: len,
            allowed,
        }
    }

    pub fn and(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if (self.batch, self.q_len, self.k_len) != (other.batch, other.q_len, other.k_len) {
            return Err(shape_err(
                "attention mask",
                &[self.batch, self.q_len, self.k_len],
                &[other.batch, other.q_len, other.k_len],
            ));
        }
        Ok(AttentionMask {
            allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect(),
            ..*self
        })
    }

    #[inline]
    pub fn allows(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.q_len + q) * self.k_len + k]
    }

    fn check(&self, batch: usize, q_len: usize, k_len: usize) -> Result<()> {
        if (self.batch, self.q_len, self.k_len) != (batch, q_len, k_len) {
            return Err(shape_err(
                "attention mask",
                &[self.batch, self.q_len, self.k_len],
                &[batch, q_len, k_len],
            ));
        }
        for b in 0..batch {
            for q in 0..q_len {
                if !(0..k_len).any(|k| self.allows(b, q, k)) {
                    return Err(Error::AllMasked { batch: b, query: q });
                }
            }
        }
        Ok(())
    }
}

/// Softmax over the last axis of `[B, H, Tq, Tk]` scores where masked entries
/// get exactly zero weight.
fn masked_softmax(scores: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let (b, h, tq, tk) = (scores.dim(0), scores.dim(1), scores.dim(2), scores.dim(3));
    let mut y = scores.to_vec();
    for bi in 0..b {
        for hi in 0..h {
            for q in 0..tq {
                let row = &mut y[((bi * h + hi) * tq + q) * tk..((bi * h + hi) * tq + q + 1) * tk];
                softmax_row(row, |k| mask.map_or(true, |m| m.allows(bi, q, k)));
            }
        }
    }
    let saved = if scores.requires_grad() { y.clone() } else { Vec::new() };
    Ok(Tensor::from_op(y, scores.shape().to_vec(), vec![scores.clone()], move |g| {
        let mut gx = vec![0.0; saved.len()];
        for r in 0..saved.len() / tk {
            let ys = &saved[r * tk..(r + 1) * tk];
            let gs = &g[r * tk..(r + 1) * tk];
            let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
            for k in 0..tk {
                gx[r * tk + k] = ys[k] * (gs[k] - dot);
            }
        }
        vec![Some(gx)]
    }))
}

#[inline]
fn softmax_row(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (k, v) in row.iter().enumerate() {
        if allowed(k) {
            max = max.max(*v);
        }
    }
    let mut s = 0.0;
    for (k, v) in row.iter_mut().enumerate() {
        if allowed(k) {
            *v = math::exp(*v - max);
            s += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Scaled dot-product attention over already-projected `[B, T, d]` inputs.
fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let (b, tq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let tk = k.dim(1);
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    if !(q.requires_grad() || k.requires_grad() || v.requires_grad()) {
        return sdpa_streaming(q, k, v, heads, mask);
    }
    let split = |x: &Tensor, t: usize| x.reshape(&[b, t, heads, dh])?.permute(&[0, 2, 1, 3]);
    let qh = split(q, tq)?;
    let kt = k.reshape(&[b, tk, heads, dh])?.permute(&[0, 2, 3, 1])?;
    let vh = split(v, tk)?;
    let scores = qh.matmul(&kt)?.scale(scale);
    let weights = masked_softmax(&scores, mask)?;
    let ctx = weights.matmul(&vh)?;
    ctx.permute(&[0, 2, 1, 3])?.reshape(&[b, tq, d])
}

/// Row-at-a-time attention for inference: memory stays `O(Tk)` per query.
/// Same summation order as the recorded path.
fn sdpa_streaming(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let (b, tq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let tk = k.dim(1);
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; b * tq * d];
    let mut row = vec![0.0; tk];
    for bi in 0..b {
        for hi in 0..heads {
            for qi in 0..tq {
                let qv = &qd[(bi * tq + qi) * d + hi * dh..(bi * tq + qi) * d + (hi + 1) * dh];
                for (ki, r) in row.iter_mut().enumerate() {
                    let kv = &kd[(bi * tk + ki) * d + hi * dh..(bi * tk + ki) * d + (hi + 1) * dh];
                    let mut s = 0.0;
                    for (a, c) in qv.iter().zip(kv) {
                        s += a * c;
                    }
                    *r = s * scale;
                }
                softmax_row(&mut row, |k| mask.map_or(true, |m| m.allows(bi, qi, k)));
                let o = &mut out[(bi * tq + qi) * d + hi * dh..(bi * tq + qi) * d + (hi + 1) * dh];
                for (ki, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vv = &vd[(bi * tk + ki) * d + hi * dh..(bi * tk + ki) * d + (hi + 1) * dh];
                    for (ov, x) in o.iter_mut().zip(vv) {
                        *ov += p * x;
                    }
                }
            }
        }
    }
    Tensor::new(out, &[b, tq, d])
}

/// Query/key/value projections, per-head scaled dot-product attention,
/// head concatenation and one output projection.
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, cfg: AttentionConfig) -> Result<MultiHeadAttention> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(MultiHeadAttention {
            cfg,
            wq: Linear::new(init, d, d, true),
            wk: Linear::new(init, d, d, true),
            wv: Linear::new(init, d, d, true),
            wo: Linear::new(init, d, d, true),
        })
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
        let d = self.cfg.model_dim;
        for x in [query, key, value] {
            if x.rank() != 3 || x.dim(2) != d {
                return Err(shape_err("multi_head_attention", x.shape(), &[d]));
            }
        }
        if key.shape() != value.shape() || key.dim(0) != query.dim(0) {
            return Err(shape_err("multi_head_attention", key.shape(), value.shape()));
        }
        if let Some(m) = mask {
            m.check(query.dim(0), query.dim(1), key.dim(1))?;
        }
        let q = self.wq.forward(query)?;
        let k = self.wk.forward(key)?;
        let v = self.wv.forward(value)?;
        let ctx = sdpa(&q, &k, &v, self.cfg.num_heads, mask)?;
        self.wo.forward(&ctx)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
    }
}

/// Attention followed by dropout of its output.
pub fn multi_head_attention(
    attn: &MultiHeadAttention,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
    ctx: &Ctx,
) -> Result<Tensor> {
    let y = attn.forward(q, k, v, mask)?;
    dropout(&y, attn.cfg.dropout_p.min(0.999_999), ctx)
}
