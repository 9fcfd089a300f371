use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math::log_add;
use crate::{BLANK_ID, EOS_ID};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// CTC prefix probabilities over one utterance's `[frames, classes]`
/// log-posteriors.
///
/// For a prefix `g` the state keeps, per frame `t`, the log-probability
/// that the first `t + 1` frames collapse to exactly `g`, split by whether
/// the last frame is a label (`gamma_n`) or a blank (`gamma_b`). The prefix
/// score is the log-probability of all label sequences starting with `g`.
pub struct CtcPrefixScorer<'a> {
    log_probs: &'a [f64],
    frames: usize,
    classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    pub gamma_n: Vec<f64>,
    pub gamma_b: Vec<f64>,
    pub last: Option<usize>,
    /// Log-probability of every label sequence that starts with this prefix.
    pub score: f64,
}

impl CtcPrefixState {
    /// Log-probability that the whole utterance collapses to exactly this
    /// prefix.
    pub fn full_score(&self) -> f64 {
        match (self.gamma_n.last(), self.gamma_b.last()) {
            (Some(&n), Some(&b)) => log_add(n, b),
            _ => NEG_INF,
        }
    }
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(log_probs: &'a [f64], frames: usize, classes: usize) -> Result<CtcPrefixScorer<'a>> {
        if log_probs.len() != frames * classes || frames == 0 {
            return Err(shape_err("ctc_prefix_score", &[log_probs.len()], &[frames, classes]));
        }
        Ok(CtcPrefixScorer {
            log_probs,
            frames,
            classes,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.log_probs[t * self.classes + k]
    }

    /// The empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let mut gamma_b = vec![0.0; self.frames];
        let mut acc = 0.0;
        for (t, g) in gamma_b.iter_mut().enumerate() {
            acc += self.lp(t, BLANK_ID);
            *g = acc;
        }
        CtcPrefixState {
            gamma_n: vec![NEG_INF; self.frames],
            gamma_b,
            last: None,
            score: 0.0,
        }
    }

    /// Score of `prefix + c`. Extending by EOS returns the probability of
    /// the prefix being the complete transcript and no state.
    pub fn extend(&self, g: &CtcPrefixState, c: usize) -> (f64, Option<CtcPrefixState>) {
        if c == EOS_ID {
            return (g.full_score(), None);
        }
        let t_len = self.frames;
        let mut gamma_n = vec![NEG_INF; t_len];
        let mut gamma_b = vec![NEG_INF; t_len];
        if g.last.is_none() {
            gamma_n[0] = self.lp(0, c);
        }
        let mut psi = gamma_n[0];
        for t in 1..t_len {
            // mass that may move from g into h = g + c at frame t
            let phi = if g.last == Some(c) {
                g.gamma_b[t - 1]
            } else {
                log_add(g.gamma_b[t - 1], g.gamma_n[t - 1])
            };
            let emit = self.lp(t, c);
            gamma_n[t] = log_add(gamma_n[t - 1], phi) + emit;
            gamma_b[t] = log_add(gamma_b[t - 1], gamma_n[t - 1]) + self.lp(t, BLANK_ID);
            psi = log_add(psi, phi + emit);
        }
        let state = CtcPrefixState {
            gamma_n,
            gamma_b,
            last: Some(c),
            score: psi,
        };
        (psi, Some(state))
    }

    /// State of a whole blank-free prefix, built one label at a time.
    pub fn state_of(&self, prefix: &[usize]) -> CtcPrefixState {
        let mut s = self.initial();
        for &c in prefix {
            s = self.extend(&s, c).1.expect("labels are not EOS");
        }
        s
    }
}

/// `prefix + next` score in one call.
pub fn ctc_prefix_score(log_probs: &[f64], frames: usize, classes: usize, prefix: &[usize], next: usize) -> Result<f64> {
    let scorer = CtcPrefixScorer::new(log_probs, frames, classes)?;
    Ok(scorer.extend(&scorer.state_of(prefix), next).0)
}
