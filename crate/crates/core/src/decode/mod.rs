//! Greedy CTC decoding, joint CTC/attention beam search and WER scoring.

mod beam;
mod ctc_prefix;
mod wer;

use alloc::vec::Vec;

pub use beam::{beam_search, recognize, AttentionScorer, BeamInputs, DecodeConfig, Hypothesis, PrefixScorer};
pub use ctc_prefix::{ctc_prefix_score, CtcPrefixScorer, CtcPrefixState};
pub use wer::{align, word_error_rate, EditCounts};

use crate::BLANK_ID;

/// Best path of `[frames, classes]` log-posteriors: per-frame argmax (lowest
/// class on ties), repeats collapsed, blanks dropped.
pub fn greedy_ctc_decode(log_probs: &[f64], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.chunks(classes) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
            .0;
        if Some(best) != prev && best != BLANK_ID {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
