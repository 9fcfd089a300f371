use alloc::vec;

use crate::error::Result;
use crate::math;
use crate::nn::{
    causal_depthwise_conv1d, dropout, join, multi_head_attention, AttentionConfig, AttentionMask, Ctx, Init,
    LayerNorm, Linear, Module, MultiHeadAttention, RmsNorm,
};
use crate::ssm::{ScanMode, SelectiveSsm, SsmConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub dropout_p: f64,
    pub scan_mode: ScanMode,
}

/// Pre-norm gated block:
///
/// ```text
/// u    = rms_norm(x)
/// main = ssm(silu(conv(W_main u)))
/// gate = silu(W_gate u)
/// y    = x + dropout(W_out (main * gate))
/// ```
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub norm: RmsNorm,
    pub in_main: Linear,
    pub in_gate: Linear,
    /// `[d_inner, conv_width]`
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub ssm: SelectiveSsm,
    /// Zero at init, so a fresh block is the identity.
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new(init: &mut Init, cfg: MambaConfig) -> Result<MambaBlock> {
        let (d, di, w) = (cfg.d_model, cfg.d_inner, cfg.conv_width);
        let bound = 1.0 / math::sqrt(w as f64);
        Ok(MambaBlock {
            cfg,
            norm: RmsNorm::new(init, d),
            in_main: Linear::new(init, d, di, false),
            in_gate: Linear::new(init, d, di, false),
            conv_kernel: init.uniform(&[di, w], bound),
            conv_bias: init.uniform(&[di], bound),
            ssm: SelectiveSsm::new(init, SsmConfig::new(di, cfg.state_dim))?,
            out_proj: Linear::zeros(init, di, d, false),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let u = self.norm.forward(x)?;
        let main = self.in_main.forward(&u)?;
        let main = causal_depthwise_conv1d(&main, &self.conv_kernel, &self.conv_bias)?.silu();
        let main = self.ssm.forward(&main, self.cfg.scan_mode)?;
        let gate = self.in_gate.forward(&u)?.silu();
        let y = self.out_proj.forward(&main.mul(&gate)?)?;
        x.add(&dropout(&y, self.cfg.dropout_p, ctx)?)
    }
}

impl Module for MambaBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.in_main.visit_params(&join(prefix, "in_main"), f);
        self.in_gate.visit_params(&join(prefix, "in_gate"), f);
        f(&join(prefix, "conv.weight"), &self.conv_kernel);
        f(&join(prefix, "conv.bias"), &self.conv_bias);
        self.ssm.visit_params(&join(prefix, "ssm"), f);
        self.out_proj.visit_params(&join(prefix, "out_proj"), f);
    }
}

/// RMSNorm followed by attention and a residual connection. The output
/// projection of the attention starts at zero.
pub struct RmsAttention {
    pub norm: RmsNorm,
    pub attn: MultiHeadAttention,
}

impl RmsAttention {
    pub fn new(init: &mut Init, cfg: AttentionConfig) -> Result<RmsAttention> {
        let mut attn = MultiHeadAttention::new(init, cfg)?;
        attn.wo = Linear::zeros(init, cfg.model_dim, cfg.model_dim, true);
        Ok(RmsAttention {
            norm: RmsNorm::new(init, cfg.model_dim),
            attn,
        })
    }

    /// Self-attention when `memory` is `None`, otherwise cross-attention
    /// with keys and values from `memory`.
    pub fn forward(&self, x: &Tensor, memory: Option<&Tensor>, mask: &AttentionMask, ctx: &Ctx) -> Result<Tensor> {
        let q = self.norm.forward(x)?;
        let kv = memory.unwrap_or(&q);
        x.add(&multi_head_attention(&self.attn, &q, kv, kv, Some(mask), ctx)?)
    }
}

impl Module for RmsAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
    }
}

/// Mamba, then RMSNorm + self-attention, then Mamba.
pub struct MambaEncoderBlock {
    pub mamba1: MambaBlock,
    pub attn: RmsAttention,
    pub mamba2: MambaBlock,
}

impl MambaEncoderBlock {
    pub fn new(init: &mut Init, mamba: MambaConfig, attn: AttentionConfig) -> Result<MambaEncoderBlock> {
        Ok(MambaEncoderBlock {
            mamba1: MambaBlock::new(init, mamba)?,
            attn: RmsAttention::new(init, attn)?,
            mamba2: MambaBlock::new(init, mamba)?,
        })
    }

    /// `mask` is the key-padding mask of the utterances.
    pub fn forward(&self, x: &Tensor, mask: &AttentionMask, ctx: &Ctx) -> Result<Tensor> {
        let h = self.mamba1.forward(x, ctx)?;
        let h = self.attn.forward(&h, None, mask, ctx)?;
        self.mamba2.forward(&h, ctx)
    }
}

impl Module for MambaEncoderBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mamba1.visit_params(&join(prefix, "mamba1"), f);
        self.attn.visit_params(&join(prefix, "self_attn"), f);
        self.mamba2.visit_params(&join(prefix, "mamba2"), f);
    }
}

/// Mamba, then RMSNorm + source-target attention over the encoder output,
/// then Mamba. There is no self-attention, so the block is causal in the
/// text positions.
pub struct MambaDecoderBlock {
    pub mamba1: MambaBlock,
    pub cross: RmsAttention,
    pub mamba2: MambaBlock,
}

impl MambaDecoderBlock {
    pub fn new(init: &mut Init, mamba: MambaConfig, attn: AttentionConfig) -> Result<MambaDecoderBlock> {
        Ok(MambaDecoderBlock {
            mamba1: MambaBlock::new(init, mamba)?,
            cross: RmsAttention::new(init, attn)?,
            mamba2: MambaBlock::new(init, mamba)?,
        })
    }

    pub fn forward(&self, y: &Tensor, memory: &Tensor, memory_mask: &AttentionMask, ctx: &Ctx) -> Result<Tensor> {
        let h = self.mamba1.forward(y, ctx)?;
        let h = self.cross.forward(&h, Some(memory), memory_mask, ctx)?;
        self.mamba2.forward(&h, ctx)
    }
}

impl Module for MambaDecoderBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mamba1.visit_params(&join(prefix, "mamba1"), f);
        self.cross.visit_params(&join(prefix, "src_attn"), f);
        self.mamba2.visit_params(&join(prefix, "mamba2"), f);
    }
}

/// Position-wise `W2 relu(W1 x)`.
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            w1: Linear::new(init, d, hidden, true),
            w2: Linear::new(init, hidden, d, true),
        }
    }

    pub fn forward(&self, x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
        let h = dropout(&self.w1.forward(x)?.relu(), p, ctx)?;
        self.w2.forward(&h)
    }
}

impl Module for FeedForward {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.w1.visit_params(&join(prefix, "w1"), f);
        self.w2.visit_params(&join(prefix, "w2"), f);
    }
}

/// Pre-LayerNorm Transformer encoder layer.
pub struct TransformerEncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout_p: f64,
}

impl TransformerEncoderBlock {
    pub fn new(init: &mut Init, attn: AttentionConfig, ffn_dim: usize) -> Result<TransformerEncoderBlock> {
        let d = attn.model_dim;
        Ok(TransformerEncoderBlock {
            norm1: LayerNorm::new(init, d),
            attn: MultiHeadAttention::new(init, attn)?,
            norm2: LayerNorm::new(init, d),
            ffn: FeedForward::new(init, d, ffn_dim),
            dropout_p: attn.dropout_p,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &AttentionMask, ctx: &Ctx) -> Result<Tensor> {
        let q = self.norm1.forward(x)?;
        let x = x.add(&multi_head_attention(&self.attn, &q, &q, &q, Some(mask), ctx)?)?;
        let h = self.ffn.forward(&self.norm2.forward(&x)?, self.dropout_p, ctx)?;
        x.add(&dropout(&h, self.dropout_p, ctx)?)
    }
}

impl Module for TransformerEncoderBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "self_attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }
}

/// Pre-LayerNorm Transformer decoder layer: causal self-attention,
/// source-target attention, feed-forward.
pub struct TransformerDecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub dropout_p: f64,
}

impl TransformerDecoderBlock {
    pub fn new(init: &mut Init, attn: AttentionConfig, ffn_dim: usize) -> Result<TransformerDecoderBlock> {
        let d = attn.model_dim;
        Ok(TransformerDecoderBlock {
            norm1: LayerNorm::new(init, d),
            self_attn: MultiHeadAttention::new(init, attn)?,
            norm2: LayerNorm::new(init, d),
            cross: MultiHeadAttention::new(init, attn)?,
            norm3: LayerNorm::new(init, d),
            ffn: FeedForward::new(init, d, ffn_dim),
            dropout_p: attn.dropout_p,
        })
    }

    pub fn forward(
        &self,
        y: &Tensor,
        memory: &Tensor,
        self_mask: &AttentionMask,
        memory_mask: &AttentionMask,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let q = self.norm1.forward(y)?;
        let y = y.add(&multi_head_attention(&self.self_attn, &q, &q, &q, Some(self_mask), ctx)?)?;
        let q = self.norm2.forward(&y)?;
        let y = y.add(&multi_head_attention(&self.cross, &q, memory, memory, Some(memory_mask), ctx)?)?;
        let h = self.ffn.forward(&self.norm3.forward(&y)?, self.dropout_p, ctx)?;
        y.add(&dropout(&h, self.dropout_p, ctx)?)
    }
}

impl Module for TransformerDecoderBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.self_attn.visit_params(&join(prefix, "self_attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.cross.visit_params(&join(prefix, "src_attn"), f);
        self.norm3.visit_params(&join(prefix, "norm3"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }
}

/// Puts every parameter of `m` to Uniform(-scale, scale), deterministic in
/// `seed`. Used to leave the zero-init regime in tests and benchmarks.
pub fn randomize(m: &dyn Module, seed: u64, scale: f64) {
    let mut init = Init::new(seed);
    m.visit_params("", &mut |_, t| {
        let fresh = init.uniform(t.shape(), scale).to_vec();
        t.data_mut().copy_from_slice(&fresh);
    });
}

pub(crate) fn stack<T>(n: usize, mut make: impl FnMut() -> Result<T>) -> Result<alloc::vec::Vec<T>> {
    let mut v = vec![];
    for _ in 0..n {
        v.push(make()?);
    }
    Ok(v)
}
