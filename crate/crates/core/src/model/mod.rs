//! Encoder-decoder recogniser with Mamba blocks and its Transformer
//! counterparts.
//!
//! ```text
//! features -> frontend -> M x [Mamba, RMS-ATT, Mamba] -> RMSNorm -> enc_out
//! enc_out  -> ctc_head                               -> CTC logits, V + 1 classes
//! tokens   -> embedding + PE -> N x [Mamba, RMS-STA(enc_out), Mamba]
//!          -> RMSNorm -> out_proj                     -> decoder logits, V classes
//! ```
//!
//! CTC class `k` is token id `k`, with class 0 the blank. The head has one
//! extra class beyond the vocabulary that no target ever uses.

mod blocks;
mod frontend;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use blocks::{
    randomize, FeedForward, MambaBlock, MambaConfig, MambaDecoderBlock, MambaEncoderBlock, RmsAttention,
    TransformerDecoderBlock, TransformerEncoderBlock,
};
pub use frontend::{conv_len, subsampled_len, Frontend, SUBSAMPLE};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    dropout, embedding_lookup, join, sinusoidal_positional_encoding, AttentionConfig, AttentionMask, Ctx, Init,
    LayerNorm, Linear, Module, RmsNorm,
};
use crate::ssm::ScanMode;
use crate::tensor::Tensor;
use crate::FIRST_LABEL_ID;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    /// Mamba encoder blocks (M).
    pub encoder_blocks: usize,
    /// Mamba decoder blocks (N).
    pub decoder_blocks: usize,
    pub conv_width: usize,
    pub ssm_state: usize,
    pub expand: usize,
    /// Output symbols including the reserved blank/BOS/EOS ids.
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub feature_dim: usize,
    pub frontend_subsample: usize,
    pub frontend_channels: (usize, usize),
    pub transformer_encoder_blocks: usize,
    pub transformer_decoder_blocks: usize,
    pub ffn_dim: usize,
    pub mamba_encoder: bool,
    pub mamba_decoder: bool,
    pub use_s2s: bool,
    pub encoder_pos_enc: bool,
    pub scan_mode: ScanMode,
}

impl ModelConfig {
    /// d_model 512, 8 heads, M = 7, N = 3, conv width 4, state 256, expand 2.
    pub fn base(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 512,
            num_heads: 8,
            encoder_blocks: 7,
            decoder_blocks: 3,
            conv_width: 4,
            ssm_state: 256,
            expand: 2,
            vocab_size,
            dropout_p: 0.1,
            feature_dim: 80,
            frontend_subsample: SUBSAMPLE,
            frontend_channels: (64, 32),
            transformer_encoder_blocks: 12,
            transformer_decoder_blocks: 6,
            ffn_dim: 2048,
            mamba_encoder: true,
            mamba_decoder: true,
            use_s2s: true,
            encoder_pos_enc: true,
            scan_mode: ScanMode::Parallel,
        }
    }

    /// The Transformer baseline at the same width: 12 encoder and 6 decoder
    /// layers with 2048-wide feed-forward blocks.
    pub fn transformer_baseline(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            mamba_encoder: false,
            mamba_decoder: false,
            ..ModelConfig::base(vocab_size)
        }
    }

    /// Small model for tests and smoke runs.
    pub fn tiny(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            num_heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ssm_state: 2,
            dropout_p: 0.0,
            feature_dim: 8,
            frontend_channels: (2, 2),
            transformer_encoder_blocks: 1,
            transformer_decoder_blocks: 1,
            ffn_dim: 16,
            ..ModelConfig::base(vocab_size)
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            d_inner: self.d_inner(),
            state_dim: self.ssm_state,
            conv_width: self.conv_width,
            dropout_p: self.dropout_p,
            scan_mode: self.scan_mode,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.d_model,
            num_heads: self.num_heads,
            dropout_p: self.dropout_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("conv_width", self.conv_width),
            ("ssm_state", self.ssm_state),
            ("expand", self.expand),
            ("feature_dim", self.feature_dim),
            ("frontend_channels.0", self.frontend_channels.0),
            ("frontend_channels.1", self.frontend_channels.1),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        self.attention().validate()?;
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        if self.frontend_subsample != SUBSAMPLE {
            return Err(Error::Config(format!(
                "frontend_subsample {} unsupported, the front-end subsamples by {SUBSAMPLE}",
                self.frontend_subsample
            )));
        }
        if self.vocab_size <= FIRST_LABEL_ID {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for labels after the {FIRST_LABEL_ID} reserved ids",
                self.vocab_size
            )));
        }
        if self.encoder_block_count() == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if !self.use_s2s && !self.mamba_decoder {
            return Err(Error::Config(
                "mamba_decoder = false selects a Transformer decoder but use_s2s = false removes the decoder".into(),
            ));
        }
        if self.use_s2s && self.decoder_block_count() == 0 {
            return Err(Error::Config("use_s2s = true needs at least one decoder block".into()));
        }
        Ok(())
    }

    pub fn encoder_block_count(&self) -> usize {
        if self.mamba_encoder {
            self.encoder_blocks
        } else {
            self.transformer_encoder_blocks
        }
    }

    pub fn decoder_block_count(&self) -> usize {
        if self.mamba_decoder {
            self.decoder_blocks
        } else {
            self.transformer_decoder_blocks
        }
    }

    /// Number of CTC classes.
    pub fn ctc_classes(&self) -> usize {
        self.vocab_size + 1
    }
}

pub enum Norm {
    Rms(RmsNorm),
    Layer(LayerNorm),
}

impl Norm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Rms(n) => n.forward(x),
            Norm::Layer(n) => n.forward(x),
        }
    }
}

impl Module for Norm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Norm::Rms(n) => n.visit_params(prefix, f),
            Norm::Layer(n) => n.visit_params(prefix, f),
        }
    }
}

pub enum EncoderStack {
    Mamba(Vec<MambaEncoderBlock>),
    Transformer(Vec<TransformerEncoderBlock>),
}

impl EncoderStack {
    pub fn forward(&self, x: &Tensor, mask: &AttentionMask, ctx: &Ctx) -> Result<Tensor> {
        let mut h = x.clone();
        match self {
            EncoderStack::Mamba(blocks) => {
                for b in blocks {
                    h = b.forward(&h, mask, ctx)?;
                }
            }
            EncoderStack::Transformer(blocks) => {
                for b in blocks {
                    h = b.forward(&h, mask, ctx)?;
                }
            }
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        match self {
            EncoderStack::Mamba(b) => b.len(),
            EncoderStack::Transformer(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Module for EncoderStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            EncoderStack::Mamba(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit_params(&join(prefix, &format!("{i}")), f);
                }
            }
            EncoderStack::Transformer(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit_params(&join(prefix, &format!("{i}")), f);
                }
            }
        }
    }
}

pub enum DecoderStack {
    Mamba(Vec<MambaDecoderBlock>),
    Transformer(Vec<TransformerDecoderBlock>),
}

impl Module for DecoderStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            DecoderStack::Mamba(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit_params(&join(prefix, &format!("{i}")), f);
                }
            }
            DecoderStack::Transformer(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit_params(&join(prefix, &format!("{i}")), f);
                }
            }
        }
    }
}

/// Autoregressive text side.
pub struct Decoder {
    /// `[V, d_model]`
    pub embedding: Tensor,
    pub blocks: DecoderStack,
    pub norm: Norm,
    pub out_proj: Linear,
    pub dropout_p: f64,
}

impl Decoder {
    /// `tokens: [B, Ty]` row-major, BOS first; `memory: [B, T', d]`.
    pub fn forward(
        &self,
        tokens: &[usize],
        batch: usize,
        len: usize,
        memory: &Tensor,
        memory_lens: &[usize],
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let d = self.embedding.dim(1);
        let x = embedding_lookup(&self.embedding, tokens, batch, len)?;
        let x = x.add(&sinusoidal_positional_encoding(len, d)?)?;
        let mut h = dropout(&x, self.dropout_p, ctx)?;
        let memory_mask = AttentionMask::from_key_lengths(memory_lens, len, memory.dim(1));
        match &self.blocks {
            DecoderStack::Mamba(blocks) => {
                for b in blocks {
                    h = b.forward(&h, memory, &memory_mask, ctx)?;
                }
            }
            DecoderStack::Transformer(blocks) => {
                let causal = AttentionMask::causal(batch, len);
                for b in blocks {
                    h = b.forward(&h, memory, &causal, &memory_mask, ctx)?;
                }
            }
        }
        self.out_proj.forward(&self.norm.forward(&h)?)
    }
}

impl Module for Decoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "embedding"), &self.embedding);
        self.blocks.visit_params(&join(prefix, "blocks"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.out_proj.visit_params(&join(prefix, "out_proj"), f);
    }
}

/// Encoder output with the valid frame count of every utterance.
#[derive(Clone)]
pub struct Encoded {
    pub out: Tensor,
    pub lens: Vec<usize>,
}

pub struct AsrOutput {
    /// `[B, T', V + 1]`
    pub ctc_logits: Tensor,
    /// `[B, Ty, V]`, absent without a decoder.
    pub s2s_logits: Option<Tensor>,
    pub encoded: Encoded,
}

pub struct SpeechMambaModel {
    pub cfg: ModelConfig,
    pub frontend: Frontend,
    pub encoder: EncoderStack,
    pub encoder_norm: Norm,
    pub ctc_head: Linear,
    pub decoder: Option<Decoder>,
}

impl SpeechMambaModel {
    /// Builds the variant the flags of `cfg` select.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<SpeechMambaModel> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let init = &mut init;
        let (d, attn) = (cfg.d_model, cfg.attention());
        let frontend = Frontend::new(
            init,
            cfg.feature_dim,
            cfg.frontend_channels,
            d,
            cfg.encoder_pos_enc,
            cfg.dropout_p,
        );
        let (encoder, encoder_norm) = if cfg.mamba_encoder {
            let blocks = blocks::stack(cfg.encoder_blocks, || MambaEncoderBlock::new(init, cfg.mamba(), attn))?;
            (EncoderStack::Mamba(blocks), Norm::Rms(RmsNorm::new(init, d)))
        } else {
            let blocks = blocks::stack(cfg.transformer_encoder_blocks, || {
                TransformerEncoderBlock::new(init, attn, cfg.ffn_dim)
            })?;
            (EncoderStack::Transformer(blocks), Norm::Layer(LayerNorm::new(init, d)))
        };
        let ctc_head = Linear::new(init, d, cfg.ctc_classes(), true);
        let decoder = if cfg.use_s2s {
            let embedding = init.uniform(&[cfg.vocab_size, d], 1.0);
            let (blocks, norm) = if cfg.mamba_decoder {
                let b = blocks::stack(cfg.decoder_blocks, || MambaDecoderBlock::new(init, cfg.mamba(), attn))?;
                (DecoderStack::Mamba(b), Norm::Rms(RmsNorm::new(init, d)))
            } else {
                let b = blocks::stack(cfg.transformer_decoder_blocks, || {
                    TransformerDecoderBlock::new(init, attn, cfg.ffn_dim)
                })?;
                (DecoderStack::Transformer(b), Norm::Layer(LayerNorm::new(init, d)))
            };
            Some(Decoder {
                embedding,
                blocks,
                norm,
                out_proj: Linear::new(init, d, cfg.vocab_size, true),
                dropout_p: cfg.dropout_p,
            })
        } else {
            None
        };
        Ok(SpeechMambaModel {
            cfg,
            frontend,
            encoder,
            encoder_norm,
            ctc_head,
            decoder,
        })
    }

    /// Front-end, encoder blocks and the final encoder norm.
    pub fn encode(&self, features: &Tensor, lens: &[usize], ctx: &Ctx) -> Result<Encoded> {
        let (x, lens) = self.frontend.forward(features, lens, ctx)?;
        let h = self.encode_blocks(&x, &lens, ctx)?;
        Ok(Encoded {
            out: self.encoder_norm.forward(&h)?,
            lens,
        })
    }

    /// The encoder blocks alone on already subsampled `[B, T', d]` input.
    pub fn encode_blocks(&self, x: &Tensor, lens: &[usize], ctx: &Ctx) -> Result<Tensor> {
        if x.rank() != 3 || x.dim(2) != self.cfg.d_model || lens.len() != x.dim(0) {
            return Err(shape_err("encoder", x.shape(), &[lens.len(), 0, self.cfg.d_model]));
        }
        let mask = AttentionMask::from_key_lengths(lens, x.dim(1), x.dim(1));
        self.encoder.forward(x, &mask, ctx)
    }

    pub fn ctc_logits(&self, enc: &Encoded) -> Result<Tensor> {
        self.ctc_head.forward(&enc.out)
    }

    pub fn ctc_log_probs(&self, enc: &Encoded) -> Result<Tensor> {
        self.ctc_logits(enc)?.log_softmax(2)
    }

    pub fn decoder(&self) -> Result<&Decoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a decoder (use_s2s = false)".into()))
    }

    /// Decoder logits for BOS-prefixed `tokens` (`[B, Ty]` row-major).
    pub fn decoder_logits(&self, enc: &Encoded, tokens: &[usize], batch: usize, len: usize, ctx: &Ctx) -> Result<Tensor> {
        if tokens.iter().any(|&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "decoder input id outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        self.decoder()?.forward(tokens, batch, len, &enc.out, &enc.lens, ctx)
    }

    /// Next-token log-probabilities after each of `prefixes`, all of one
    /// length, against the encoding of a single utterance.
    pub fn next_token_log_probs(&self, enc: &Encoded, prefixes: &[Vec<usize>], ctx: &Ctx) -> Result<Vec<Vec<f64>>> {
        if enc.out.dim(0) != 1 {
            return Err(shape_err("next_token_log_probs", enc.out.shape(), &[1]));
        }
        let (h, len) = (prefixes.len(), prefixes.first().map_or(0, Vec::len));
        if h == 0 || len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::InvalidArgument("prefixes must be non-empty and of equal length".into()));
        }
        let (t, d) = (enc.out.dim(1), enc.out.dim(2));
        let memory = Tensor::new(enc.out.data().repeat(h), &[h, t, d])?;
        let encoded = Encoded {
            out: memory,
            lens: vec![enc.lens[0]; h],
        };
        let tokens: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let logits = self.decoder_logits(&encoded, &tokens, h, len, ctx)?;
        let v = self.cfg.vocab_size;
        let last = logits.narrow(1, len - 1, 1)?.reshape(&[h, v])?.log_softmax(1)?.to_vec();
        Ok(last.chunks(v).map(<[f64]>::to_vec).collect())
    }

    pub fn forward_asr(
        &self,
        features: &Tensor,
        feature_lens: &[usize],
        tokens_in: &[usize],
        token_len: usize,
        ctx: &Ctx,
    ) -> Result<AsrOutput> {
        let encoded = self.encode(features, feature_lens, ctx)?;
        let ctc_logits = self.ctc_logits(&encoded)?;
        let s2s_logits = match &self.decoder {
            Some(_) if token_len > 0 => {
                Some(self.decoder_logits(&encoded, tokens_in, feature_lens.len(), token_len, ctx)?)
            }
            _ => None,
        };
        Ok(AsrOutput {
            ctc_logits,
            s2s_logits,
            encoded,
        })
    }

    pub fn param_count(&self) -> usize {
        self.num_parameters()
    }

    /// Parameter counts per top-level component, in registry order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        self.visit_params("", &mut |name, t| {
            let mut parts = name.split('.');
            let head = parts.next().unwrap_or("");
            let key = match head {
                "encoder" | "decoder" => match (parts.next(), parts.next()) {
                    (Some("blocks"), Some(i)) => format!("{head}.blocks.{i}"),
                    (Some(sub), _) => format!("{head}.{sub}"),
                    _ => String::from(head),
                },
                _ => String::from(head),
            };
            match out.last_mut() {
                Some((k, n)) if *k == key => *n += t.numel(),
                _ => out.push((key, t.numel())),
            }
        });
        out
    }
}

impl Module for SpeechMambaModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.frontend.visit_params(&join(prefix, "frontend"), f);
        self.encoder.visit_params(&join(prefix, "encoder.blocks"), f);
        self.encoder_norm.visit_params(&join(prefix, "encoder.norm"), f);
        self.ctc_head.visit_params(&join(prefix, "ctc_head"), f);
        if let Some(dec) = &self.decoder {
            dec.visit_params(&join(prefix, "decoder"), f);
        }
    }
}
