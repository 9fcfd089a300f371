use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::ctc_prefix::{CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};
use crate::model::{Encoded, SpeechMambaModel};
use crate::nn::Ctx;
use crate::{BOS_ID, EOS_ID, FIRST_LABEL_ID};

/// Anything that maps token prefixes to next-token log-probabilities over
/// the whole vocabulary: the attention decoder or an external LM.
pub trait PrefixScorer {
    /// One row of `vocab_size` log-probabilities per prefix; all prefixes
    /// have the same length and start with BOS.
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Attention decoder of a model bound to one encoded utterance.
pub struct AttentionScorer<'a> {
    pub model: &'a SpeechMambaModel,
    pub encoded: &'a Encoded,
    pub ctx: &'a Ctx,
}

impl PrefixScorer for AttentionScorer<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model.next_token_log_probs(self.encoded, prefixes, self.ctx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub ctc_weight: f64,
    /// Only used when an LM is supplied.
    pub lm_weight: f64,
    /// Output length bound as a fraction of encoder frames.
    pub max_len_ratio: f64,
    /// Absolute bound; overrides `max_len_ratio`.
    pub max_len: Option<usize>,
    /// Rank finished hypotheses by score per emitted token.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 66,
            ctc_weight: 0.4,
            lm_weight: 0.6,
            max_len_ratio: 1.0,
            max_len: None,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("ctc_weight {} not in [0, 1]", self.ctc_weight)));
        }
        if !self.lm_weight.is_finite() || !self.max_len_ratio.is_finite() || self.max_len_ratio < 0.0 {
            return Err(Error::Config("lm_weight and max_len_ratio must be finite, ratio >= 0".into()));
        }
        Ok(())
    }

    /// Number of decoding steps, EOS included.
    pub fn steps(&self, frames: usize) -> usize {
        self.max_len
            .unwrap_or_else(|| libm::ceil(self.max_len_ratio * frames as f64) as usize)
            .max(1)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// BOS first; finished hypotheses end with EOS.
    pub tokens: Vec<usize>,
    pub att_score: f64,
    pub ctc_score: f64,
    pub lm_score: f64,
    pub score: f64,
    pub finished: bool,
    ctc_state: Option<CtcPrefixState>,
}

impl Hypothesis {
    /// Emitted labels without BOS and EOS.
    pub fn labels(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    fn rank_score(&self, normalize: bool) -> f64 {
        if normalize {
            self.score / (self.tokens.len() - 1) as f64
        } else {
            self.score
        }
    }
}

/// Inputs of one joint beam search.
pub struct BeamInputs<'a> {
    pub vocab_size: usize,
    /// Attention decoder; required unless `ctc_weight == 1`.
    pub attention: Option<&'a dyn PrefixScorer>,
    /// CTC log-posteriors `[frames, classes]`; required unless `ctc_weight == 0`.
    pub ctc: Option<CtcPrefixScorer<'a>>,
    pub lm: Option<&'a dyn PrefixScorer>,
    /// Encoder frames, for the length bound.
    pub frames: usize,
}

struct Candidate {
    hyp: usize,
    token: usize,
    att: f64,
    ctc: f64,
    lm: f64,
    score: f64,
}

/// One-pass joint CTC/attention beam search.
///
/// A hypothesis extended by token `c` gains
/// `(1 - w) * log p_att(c) + w * (ctc_prefix(h + c) - ctc_prefix(h)) + lm_w * log p_lm(c)`.
/// Each step keeps the best `beam_width` extensions over all live
/// hypotheses; extensions by EOS are finished and leave the beam. At the
/// last step only EOS is allowed. Ties go to the lower token id, then the
/// earlier hypothesis. Returns the finished hypotheses, best first.
pub fn beam_search(inputs: &BeamInputs<'_>, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let w = cfg.ctc_weight;
    if w < 1.0 && inputs.attention.is_none() {
        return Err(Error::Config(format!("ctc_weight {w} < 1 needs an attention decoder")));
    }
    if w > 0.0 && inputs.ctc.is_none() {
        return Err(Error::Config(format!("ctc_weight {w} > 0 needs CTC posteriors")));
    }
    let v = inputs.vocab_size;
    let steps = cfg.steps(inputs.frames);
    let emittable: Vec<usize> = core::iter::once(EOS_ID).chain(FIRST_LABEL_ID..v).collect();

    let mut live = vec![Hypothesis {
        tokens: vec![BOS_ID],
        att_score: 0.0,
        ctc_score: 0.0,
        lm_score: 0.0,
        score: 0.0,
        finished: false,
        ctc_state: inputs.ctc.as_ref().map(CtcPrefixScorer::initial),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..steps {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let att = match (w < 1.0, inputs.attention) {
            (true, Some(a)) => Some(a.next_log_probs(&prefixes)?),
            _ => None,
        };
        let lm = match inputs.lm {
            Some(l) => Some(l.next_log_probs(&prefixes)?),
            None => None,
        };
        let allowed: &[usize] = if step + 1 == steps { &emittable[..1] } else { &emittable };
        let mut cands: Vec<Candidate> = Vec::with_capacity(live.len() * allowed.len());
        let mut new_states: Vec<Vec<Option<CtcPrefixState>>> = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let mut states = Vec::with_capacity(allowed.len());
            for &c in allowed {
                let a = att.as_ref().map_or(0.0, |rows| rows[hi][c]);
                let l = lm.as_ref().map_or(0.0, |rows| rows[hi][c]);
                let (ctc, state) = match (&inputs.ctc, &h.ctc_state) {
                    (Some(scorer), Some(st)) if w > 0.0 => scorer.extend(st, c),
                    _ => (0.0, None),
                };
                let delta_ctc = if w > 0.0 { ctc - h.ctc_score } else { 0.0 };
                let score = h.score + (1.0 - w) * a + w * delta_ctc + cfg.lm_weight * l;
                states.push(state);
                if score.is_nan() {
                    continue;
                }
                cands.push(Candidate {
                    hyp: hi,
                    token: c,
                    att: a,
                    ctc,
                    lm: l,
                    score,
                });
            }
            new_states.push(states);
        }
        cands.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap_or(Ordering::Equal)
                .then(x.token.cmp(&y.token))
                .then(x.hyp.cmp(&y.hyp))
        });
        cands.truncate(cfg.beam_width);
        let mut next = Vec::with_capacity(cands.len());
        for cand in cands {
            let h = &live[cand.hyp];
            let mut tokens = h.tokens.clone();
            tokens.push(cand.token);
            let slot = allowed.iter().position(|&c| c == cand.token).expect("candidate token is allowed");
            let hyp = Hypothesis {
                tokens,
                att_score: h.att_score + cand.att,
                ctc_score: if w > 0.0 { cand.ctc } else { 0.0 },
                lm_score: h.lm_score + cand.lm,
                score: cand.score,
                finished: cand.token == EOS_ID,
                ctc_state: new_states[cand.hyp][slot].take(),
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }

    finished.retain(|h| h.score.is_finite());
    if finished.is_empty() {
        return Err(Error::BeamCollapse { max_len: steps });
    }
    let norm = cfg.length_normalize;
    finished.sort_by(|a, b| {
        b.rank_score(norm)
            .partial_cmp(&a.rank_score(norm))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(finished)
}

/// Encodes one utterance and returns its best label sequence under joint
/// decoding. CTC-only models need `ctc_weight = 1`.
pub fn recognize(
    model: &SpeechMambaModel,
    features: &crate::Tensor,
    cfg: &DecodeConfig,
    lm: Option<&dyn PrefixScorer>,
    ctx: &Ctx,
) -> Result<Hypothesis> {
    if features.rank() != 3 || features.dim(0) != 1 {
        return Err(crate::error::shape_err("recognize", features.shape(), &[1]));
    }
    let encoded = model.encode(features, &[features.dim(1)], ctx)?;
    let lp = model.ctc_log_probs(&encoded)?.to_vec();
    let (frames, classes) = (encoded.lens[0], model.cfg.ctc_classes());
    let attention = AttentionScorer {
        model,
        encoded: &encoded,
        ctx,
    };
    let inputs = BeamInputs {
        vocab_size: model.cfg.vocab_size,
        attention: model.decoder.as_ref().map(|_| &attention as &dyn PrefixScorer),
        ctc: Some(CtcPrefixScorer::new(&lp[..frames * classes], frames, classes)?),
        lm,
        frames,
    };
    let mut hyps = beam_search(&inputs, cfg)?;
    Ok(hyps.swap_remove(0))
}
