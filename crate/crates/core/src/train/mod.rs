//! Optimisation: padded batches, the joint objective over a model, gradient
//! accumulation, Adam with a warmup schedule, and checkpoint selection.

mod batching;
mod optim;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use batching::dynamic_batches;
pub use optim::{clip_grad_norm, global_grad_norm, Adam, NoamSchedule};

use crate::decode::greedy_ctc_decode;
use crate::error::{Error, Result};
use crate::model::{subsampled_len, SpeechMambaModel};
use crate::nn::{Ctx, Module};
use crate::objectives::{check_alpha, ctc_loss_per_utterance, ctc_min_frames, s2s_loss_sum, LossBreakdown};
use crate::tensor::Tensor;
use crate::{BLANK_ID, BOS_ID, EOS_ID};

/// Zero-padded utterances with their label sequences.
#[derive(Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, T, F]`
    pub features: Tensor,
    pub feature_lens: Vec<usize>,
    /// Label ids, no BOS/EOS.
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    /// `features[b]` is row-major `[T_b, feature_dim]`.
    pub fn new(ids: Vec<String>, features: &[Vec<f64>], feature_dim: usize, targets: Vec<Vec<usize>>) -> Result<Batch> {
        if ids.len() != features.len() || targets.len() != features.len() || features.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "batch of {} ids, {} feature matrices, {} targets",
                ids.len(),
                features.len(),
                targets.len()
            )));
        }
        if feature_dim == 0 || features.iter().any(|f| f.len() % feature_dim != 0) {
            return Err(Error::InvalidArgument(format!("feature rows are not multiples of {feature_dim}")));
        }
        let lens: Vec<usize> = features.iter().map(|f| f.len() / feature_dim).collect();
        let t = lens.iter().copied().max().unwrap_or(0);
        let mut data = vec![0.0; features.len() * t * feature_dim];
        for (b, f) in features.iter().enumerate() {
            data[b * t * feature_dim..b * t * feature_dim + f.len()].copy_from_slice(f);
        }
        Ok(Batch {
            ids,
            features: Tensor::new(data, &[features.len(), t, feature_dim])?,
            feature_lens: lens,
            targets,
        })
    }

    pub fn size(&self) -> usize {
        self.targets.len()
    }

    /// Decoder input `BOS y` and output `y EOS`, both padded with the blank
    /// id to a common length, row-major `[B, len]`.
    pub fn decoder_io(&self) -> (Vec<usize>, Vec<usize>, usize) {
        let len = self.targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut input = vec![BLANK_ID; self.size() * len];
        let mut output = vec![BLANK_ID; self.size() * len];
        for (b, y) in self.targets.iter().enumerate() {
            input[b * len] = BOS_ID;
            input[b * len + 1..b * len + 1 + y.len()].copy_from_slice(y);
            output[b * len..b * len + y.len()].copy_from_slice(y);
            output[b * len + y.len()] = EOS_ID;
        }
        (input, output, len)
    }

    /// Decoder target positions (labels plus EOS).
    pub fn token_count(&self) -> usize {
        self.targets.iter().map(|y| y.len() + 1).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// CTC weight.
    pub alpha: f64,
    pub label_smoothing: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 0.3,
            label_smoothing: 0.1,
        }
    }
}

/// Unnormalised loss sums of one batch. Terms with zero weight are absent.
pub struct LossTerms {
    /// Sum of per-utterance CTC losses.
    pub ctc_sum: Option<Tensor>,
    /// Sum of per-token smoothed cross-entropy.
    pub s2s_sum: Option<Tensor>,
    pub utterances: usize,
    pub tokens: usize,
}

/// Fails with the first utterance whose target cannot be aligned to its
/// subsampled frames.
pub fn check_alignable(batch: &Batch) -> Result<()> {
    for (b, (y, &len)) in batch.targets.iter().zip(&batch.feature_lens).enumerate() {
        let frames = subsampled_len(len);
        let required = ctc_min_frames(y);
        if required > frames {
            return Err(Error::ImpossibleAlignment {
                utterance: b,
                frames,
                required,
                target_len: y.len(),
            });
        }
    }
    Ok(())
}

pub fn loss_terms(model: &SpeechMambaModel, batch: &Batch, obj: &ObjectiveConfig, ctx: &Ctx) -> Result<LossTerms> {
    check_alpha(obj.alpha)?;
    if obj.alpha < 1.0 && model.decoder.is_none() {
        return Err(Error::Config(format!(
            "alpha {} < 1 needs a decoder, but the model is CTC-only",
            obj.alpha
        )));
    }
    if obj.alpha > 0.0 {
        check_alignable(batch)?;
    }
    let enc = model.encode(&batch.features, &batch.feature_lens, ctx)?;
    let ctc_sum = if obj.alpha > 0.0 {
        let lp = model.ctc_log_probs(&enc)?;
        Some(ctc_loss_per_utterance(&lp, &batch.targets, &enc.lens)?.sum_all())
    } else {
        None
    };
    let s2s_sum = if obj.alpha < 1.0 {
        let (input, output, len) = batch.decoder_io();
        let logits = model.decoder_logits(&enc, &input, batch.size(), len, ctx)?;
        Some(s2s_loss_sum(&logits, &output, obj.label_smoothing, BLANK_ID)?.0)
    } else {
        None
    };
    Ok(LossTerms {
        ctc_sum,
        s2s_sum,
        utterances: batch.size(),
        tokens: batch.token_count(),
    })
}

/// `alpha * ctc_sum / utterances + (1 - alpha) * s2s_sum / tokens`, with the
/// normalisers taken over a whole accumulation group.
fn weighted(terms: &LossTerms, alpha: f64, utterances: usize, tokens: usize) -> Result<Tensor> {
    let ctc = terms.ctc_sum.as_ref().map(|t| t.scale(alpha / utterances as f64));
    let s2s = terms.s2s_sum.as_ref().map(|t| t.scale((1.0 - alpha) / tokens as f64));
    match (ctc, s2s) {
        (Some(a), Some(b)) => a.add(&b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::InvalidArgument("no loss terms".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerConfig {
    pub objective: ObjectiveConfig,
    pub schedule: NoamSchedule,
    pub clip_norm: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            objective: ObjectiveConfig::default(),
            schedule: NoamSchedule {
                peak_lr: 1e-3,
                warmup_steps: 25_000,
            },
            clip_norm: 5.0,
        }
    }
}

/// Owns the optimiser state for one model.
pub struct Trainer<'m> {
    pub model: &'m SpeechMambaModel,
    pub cfg: TrainerConfig,
    pub optimizer: Adam,
    pub ctx: Ctx,
    params: Vec<Tensor>,
    step: u64,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m SpeechMambaModel, cfg: TrainerConfig, seed: u64) -> Trainer<'m> {
        Trainer {
            model,
            cfg,
            optimizer: Adam::default(),
            ctx: Ctx::new(seed),
            params: model.parameters().into_iter().map(|(_, t)| t).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Accumulates gradients over `group` (one micro-batch per entry) into
    /// the leaf tensors, normalised as if `group` were a single batch.
    /// Returns the group loss.
    pub fn accumulate(&self, group: &[Batch]) -> Result<LossBreakdown> {
        let alpha = self.cfg.objective.alpha;
        let utterances: usize = group.iter().map(Batch::size).sum();
        let tokens: usize = group.iter().map(Batch::token_count).sum();
        if utterances == 0 {
            return Err(Error::InvalidArgument("empty accumulation group".into()));
        }
        if alpha > 0.0 {
            for b in group {
                check_alignable(b)?;
            }
        }
        let (mut ctc, mut s2s) = (0.0, 0.0);
        for batch in group {
            let terms = loss_terms(self.model, batch, &self.cfg.objective, &self.ctx)?;
            let loss = weighted(&terms, alpha, utterances, tokens)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite(format!("loss of batch [{}]", batch.ids.join(", "))));
            }
            ctc += terms.ctc_sum.as_ref().map_or(0.0, Tensor::item);
            s2s += terms.s2s_sum.as_ref().map_or(0.0, Tensor::item);
            loss.backward()?;
        }
        LossBreakdown::new(ctc / utterances as f64, s2s / tokens as f64, alpha)
    }

    /// One optimiser update from `group`: accumulate, clip, Adam step at the
    /// scheduled rate, clear gradients.
    pub fn step(&mut self, group: &[Batch]) -> Result<StepReport> {
        self.zero_grad();
        self.ctx.set_training(true);
        let loss = self.accumulate(group);
        self.ctx.set_training(false);
        let loss = match loss {
            Ok(l) => l,
            Err(e) => {
                self.zero_grad();
                return Err(e);
            }
        };
        let grad_norm = clip_grad_norm(&self.params, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            self.zero_grad();
            return Err(Error::NonFinite("gradient norm".into()));
        }
        self.step += 1;
        let lr = self.cfg.schedule.lr(self.step);
        self.optimizer.step(&self.params, lr);
        self.zero_grad();
        Ok(StepReport {
            step: self.step,
            loss,
            lr,
            grad_norm,
        })
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Mean loss over `batches` in eval mode, normalised over all of them.
pub fn evaluate(model: &SpeechMambaModel, batches: &[Batch], obj: &ObjectiveConfig) -> Result<LossBreakdown> {
    let ctx = Ctx::new(0);
    let (mut ctc, mut s2s, mut utts, mut toks) = (0.0, 0.0, 0, 0);
    for b in batches {
        let terms = loss_terms(model, b, obj, &ctx)?;
        ctc += terms.ctc_sum.as_ref().map_or(0.0, Tensor::item);
        s2s += terms.s2s_sum.as_ref().map_or(0.0, Tensor::item);
        utts += terms.utterances;
        toks += terms.tokens;
    }
    if utts == 0 {
        return Err(Error::InvalidArgument("no evaluation data".into()));
    }
    LossBreakdown::new(ctc / utts as f64, s2s / toks as f64, obj.alpha)
}

/// Greedy CTC hypotheses for every utterance of `batch`.
pub fn greedy_decode_batch(model: &SpeechMambaModel, batch: &Batch) -> Result<Vec<Vec<usize>>> {
    let ctx = Ctx::new(0);
    let enc = model.encode(&batch.features, &batch.feature_lens, &ctx)?;
    let lp = model.ctc_log_probs(&enc)?;
    let (t, c) = (lp.dim(1), lp.dim(2));
    let data = lp.data();
    Ok(enc
        .lens
        .iter()
        .enumerate()
        .map(|(b, &len)| greedy_ctc_decode(&data[b * t * c..(b * t + len) * c], c))
        .collect())
}

/// The best `k` entries of `metrics` (lower is better, ties by index). The
/// flag is set when fewer than `k` are available.
pub fn select_top_k(metrics: &[f64], k: usize) -> Result<(Vec<usize>, bool)> {
    if metrics.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints to select from".into()));
    }
    if let Some(i) = metrics.iter().position(|m| !m.is_finite()) {
        return Err(Error::NonFinite(format!("dev metric of checkpoint {i}")));
    }
    let mut order: Vec<usize> = (0..metrics.len()).collect();
    order.sort_by(|&a, &b| metrics[a].total_cmp(&metrics[b]).then(a.cmp(&b)));
    let short = metrics.len() < k;
    order.truncate(k.max(1));
    Ok((order, short))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_io_layout() {
        let b = Batch::new(
            vec!["a".into(), "b".into()],
            &[vec![0.0; 4], vec![0.0; 2]],
            2,
            vec![vec![3, 4], vec![5]],
        )
        .unwrap();
        let (i, o, len) = b.decoder_io();
        assert_eq!(len, 3);
        assert_eq!(i, vec![BOS_ID, 3, 4, BOS_ID, 5, 0]);
        assert_eq!(o, vec![3, 4, EOS_ID, 5, EOS_ID, 0]);
        assert_eq!(b.feature_lens, vec![2, 1]);
        assert_eq!(b.token_count(), 5);
    }

    #[test]
    fn top_k() {
        let (idx, short) = select_top_k(&[0.5, 0.2, 0.9], 10).unwrap();
        assert_eq!(idx, vec![1, 0, 2]);
        assert!(short);
        let (idx, short) = select_top_k(&[0.5, 0.2, 0.9, 0.2], 2).unwrap();
        assert_eq!(idx, vec![1, 3]);
        assert!(!short);
        assert!(select_top_k(&[f64::NAN], 1).is_err());
    }
}
