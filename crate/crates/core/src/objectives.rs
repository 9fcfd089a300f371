//! Training objectives: CTC on the encoder, label-smoothed cross-entropy on
//! the decoder, and their weighted sum `alpha * ctc + (1 - alpha) * s2s`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::BLANK_ID;

/// Minimum frames needed to emit `target`: one per label plus one blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-likelihood of one target and the occupancy `d logp / d log_probs`,
/// `[frames, classes]`.
fn ctc_forward_backward(lp: &[f64], classes: usize, frames: usize, target: &[usize]) -> (f64, Vec<f64>) {
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK_ID } else { target[s / 2] };
    let skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;
    let at = |t: usize, k: usize| lp[t * classes + k];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = at(0, BLANK_ID);
    if s_len > 1 {
        alpha[1] = at(0, label(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = math::log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = math::log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + at(t, label(s));
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let logp = if s_len > 1 {
        math::log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };

    // beta[t][s]: log probability of the remaining frames t+1.. given state s at t
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + at(t + 1, label(s2));
            let mut b = next(s);
            if s + 1 < s_len {
                b = math::log_add(b, next(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = math::log_add(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut occupancy = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - logp;
            if v > ninf {
                occupancy[t * classes + label(s)] += math::exp(v);
            }
        }
    }
    (logp, occupancy)
}

/// Per-utterance CTC negative log-likelihood, `[B]`.
///
/// `log_probs: [B, T, C]` are log-softmax outputs with class 0 the blank;
/// `targets[b]` holds label ids in `1..C`, and only the first
/// `input_lens[b]` frames of utterance `b` are used.
pub fn ctc_loss_per_utterance(log_probs: &Tensor, targets: &[Vec<usize>], input_lens: &[usize]) -> Result<Tensor> {
    if log_probs.rank() != 3 || targets.len() != log_probs.dim(0) || input_lens.len() != log_probs.dim(0) {
        return Err(shape_err("ctc_loss", log_probs.shape(), &[targets.len(), input_lens.len()]));
    }
    let (bs, t_max, classes) = (log_probs.dim(0), log_probs.dim(1), log_probs.dim(2));
    let mut losses = vec![0.0; bs];
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(bs);
    {
        let lp = log_probs.data();
        for b in 0..bs {
            let (frames, target) = (input_lens[b], &targets[b]);
            if frames > t_max {
                return Err(Error::InvalidArgument(format!(
                    "utterance {b}: input length {frames} exceeds {t_max} frames"
                )));
            }
            if let Some(&bad) = target.iter().find(|&&k| k == BLANK_ID || k >= classes) {
                return Err(Error::InvalidArgument(format!(
                    "utterance {b}: target id {bad} is the blank or outside 1..{classes}"
                )));
            }
            let required = ctc_min_frames(target);
            if required > frames || frames == 0 && !target.is_empty() {
                return Err(Error::ImpossibleAlignment {
                    utterance: b,
                    frames,
                    required,
                    target_len: target.len(),
                });
            }
            if frames == 0 {
                grads.push(Vec::new());
                continue;
            }
            let slab = &lp[b * t_max * classes..(b * t_max + frames) * classes];
            let (logp, occ) = ctc_forward_backward(slab, classes, frames, target);
            if !logp.is_finite() {
                return Err(Error::NonFinite(format!("CTC likelihood of utterance {b}")));
            }
            losses[b] = -logp;
            grads.push(occ);
        }
    }
    Ok(Tensor::from_op(losses, vec![bs], vec![log_probs.clone()], move |g| {
        let mut gx = vec![0.0; bs * t_max * classes];
        for (b, occ) in grads.iter().enumerate() {
            let base = b * t_max * classes;
            for (i, o) in occ.iter().enumerate() {
                gx[base + i] = -g[b] * o;
            }
        }
        vec![Some(gx)]
    }))
}

/// Mean over utterances of [`ctc_loss_per_utterance`].
pub fn ctc_loss(log_probs: &Tensor, targets: &[Vec<usize>], input_lens: &[usize]) -> Result<Tensor> {
    ctc_loss_per_utterance(log_probs, targets, input_lens)?.mean_all_checked()
}

/// Sum of the label-smoothed cross-entropy over non-pad positions, with the
/// number of such positions.
///
/// Per position the target distribution is `(1 - eps) * onehot + eps / V`.
pub fn s2s_loss_sum(logits: &Tensor, targets: &[usize], smoothing: f64, pad_id: usize) -> Result<(Tensor, usize)> {
    if logits.rank() != 3 || targets.len() != logits.dim(0) * logits.dim(1) {
        return Err(shape_err("s2s_loss", logits.shape(), &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("label smoothing {smoothing} not in [0, 1)")));
    }
    let v = logits.dim(2);
    if let Some(&bad) = targets.iter().find(|&&k| k >= v) {
        return Err(Error::IndexOutOfRange { index: bad, size: v });
    }
    let lp = logits.log_softmax(2)?;
    let mut weights = vec![0.0; targets.len() * v];
    let mut count = 0;
    for (i, &k) in targets.iter().enumerate() {
        if k == pad_id {
            continue;
        }
        count += 1;
        let row = &mut weights[i * v..(i + 1) * v];
        row.iter_mut().for_each(|w| *w = smoothing / v as f64);
        row[k] += 1.0 - smoothing;
    }
    Ok((lp.mul_const(&weights)?.sum_all().neg(), count))
}

/// Label-smoothed cross-entropy, mean over non-pad tokens.
pub fn s2s_loss(logits: &Tensor, targets: &[usize], smoothing: f64, pad_id: usize) -> Result<Tensor> {
    let (sum, count) = s2s_loss_sum(logits, targets, smoothing, pad_id)?;
    if count == 0 {
        return Err(Error::InvalidArgument("s2s_loss: every target position is padding".into()));
    }
    Ok(sum.scale(1.0 / count as f64))
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in [0, 1]")));
    }
    Ok(())
}

/// `alpha * ctc + (1 - alpha) * s2s`.
pub fn joint_loss(ctc: f64, s2s: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * ctc + (1.0 - alpha) * s2s)
}

/// Differentiable [`joint_loss`]. A zero weight drops its term from the
/// graph, so `alpha = 1` never reaches the decoder.
pub fn joint_loss_tensor(ctc: Option<&Tensor>, s2s: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    let parts: Vec<Tensor> = [(ctc, alpha), (s2s, 1.0 - alpha)]
        .into_iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|(t, w)| {
            t.map(|t| t.scale(w))
                .ok_or_else(|| Error::InvalidArgument(format!("joint loss term with weight {w} is missing")))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [] => Err(Error::InvalidArgument("joint loss has no terms".into())),
        [one] => Ok(one.clone()),
        [a, b] => a.add(b),
        _ => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub s2s: f64,
    pub combined: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(ctc: f64, s2s: f64, alpha: f64) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            ctc,
            s2s,
            combined: joint_loss(ctc, s2s, alpha)?,
            alpha,
        })
    }
}

trait MeanChecked {
    fn mean_all_checked(&self) -> Result<Tensor>;
}

impl MeanChecked for Tensor {
    fn mean_all_checked(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::InvalidArgument("mean over an empty batch".into()));
        }
        Ok(self.mean_all())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn log_probs(init: &mut Init, b: usize, t: usize, c: usize) -> Tensor {
        init.uniform(&[b, t, c], 2.0).log_softmax(2).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let mut init = Init::new(1);
        let lp = log_probs(&mut init, 1, 1, 3);
        let loss = ctc_loss(&lp, &[vec![2]], &[1]).unwrap();
        assert!((loss.item() + lp.at(&[0, 0, 2])).abs() < 1e-14);
    }

    #[test]
    fn too_short_is_an_error() {
        let mut init = Init::new(2);
        let lp = log_probs(&mut init, 1, 1, 3);
        assert!(matches!(
            ctc_loss(&lp, &[vec![1, 2]], &[1]),
            Err(Error::ImpossibleAlignment { required: 2, .. })
        ));
        let lp = log_probs(&mut init, 1, 2, 3);
        assert!(matches!(
            ctc_loss(&lp, &[vec![1, 1]], &[2]),
            Err(Error::ImpossibleAlignment { required: 3, .. })
        ));
    }

    #[test]
    fn blank_target_is_rejected() {
        let mut init = Init::new(3);
        let lp = log_probs(&mut init, 1, 3, 3);
        assert!(ctc_loss(&lp, &[vec![0]], &[3]).is_err());
        assert!(ctc_loss(&lp, &[vec![3]], &[3]).is_err());
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut init = Init::new(4);
        let lp = log_probs(&mut init, 1, 4, 3);
        let loss = ctc_loss(&lp, &[vec![]], &[4]).unwrap();
        let expected: f64 = -(0..4).map(|t| lp.at(&[0, t, 0])).sum::<f64>();
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn occupancy_sums_to_one_per_frame() {
        let mut init = Init::new(5);
        let lp = init.uniform(&[1, 6, 4], 2.0);
        let lsm = lp.log_softmax(2).unwrap();
        let loss = ctc_loss(&lsm, &[vec![1, 3, 3]], &[6]).unwrap();
        loss.backward().unwrap();
        // d loss / d logits = softmax - occupancy, which sums to 0 per frame
        let g = lp.grad();
        for row in g.chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn padding_frames_are_ignored() {
        let mut init = Init::new(6);
        let lp = log_probs(&mut init, 1, 7, 3);
        let short = lp.narrow(1, 0, 4).unwrap().detach();
        let a = ctc_loss(&lp, &[vec![1, 2]], &[4]).unwrap().item();
        let b = ctc_loss(&short, &[vec![1, 2]], &[4]).unwrap().item();
        assert_eq!(a, b);
    }

    #[test]
    fn s2s_examples() {
        // exact one-hot predictions give zero loss
        let mut logits = vec![-1e3; 2 * 3];
        logits[1] = 0.0;
        logits[3 + 2] = 0.0;
        let t = Tensor::new(logits, &[1, 2, 3]).unwrap();
        assert!(s2s_loss(&t, &[1, 2], 0.0, 0).unwrap().item().abs() < 1e-12);

        let t = Tensor::zeros(&[2, 3, 8]);
        let l = s2s_loss(&t, &[3, 4, 5, 6, 7, 1], 0.0, 0).unwrap().item();
        assert!((l - math::ln(8.0)).abs() < 1e-12);
        assert!((l - 2.07944).abs() < 1e-5);
    }

    #[test]
    fn s2s_smoothing_closed_form() {
        // logits (10, 0, 0, 0), target 0 counted (pad id 3)
        let (big, v, eps) = (10.0, 4.0, 0.1);
        let t = Tensor::new(vec![big, 0.0, 0.0, 0.0], &[1, 1, 4]).unwrap();
        let z = math::ln(math::exp(big) + 3.0);
        let lp_hit = big - z;
        let lp_miss = -z;
        let expected = -((1.0 - eps + eps / v) * lp_hit + 3.0 * (eps / v) * lp_miss);
        let got = s2s_loss(&t, &[0], eps, 3).unwrap().item();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn s2s_padding_excluded() {
        let mut init = Init::new(7);
        let logits = init.uniform(&[1, 3, 5], 1.0);
        let full = s2s_loss(&logits, &[3, 4, 0], 0.1, 0).unwrap().item();
        let head = s2s_loss(&logits.narrow(1, 0, 2).unwrap(), &[3, 4], 0.1, 0).unwrap().item();
        assert!((full - head).abs() < 1e-14);
        assert!(s2s_loss(&logits, &[3, 4, 5], 0.1, 0).is_err());
    }

    #[test]
    fn joint_examples() {
        assert!((joint_loss(2.0, 1.0, 0.3).unwrap() - 1.3).abs() < 1e-15);
        assert_eq!(joint_loss(2.5, 1.25, 0.0).unwrap(), 1.25);
        assert_eq!(joint_loss(2.5, 1.25, 1.0).unwrap(), 2.5);
        assert!(joint_loss(1.0, 1.0, 1.5).is_err());
        let b = LossBreakdown::new(3.0, 2.0, 0.3).unwrap();
        assert!((b.combined - (0.3 * 3.0 + 0.7 * 2.0)).abs() < 1e-12);
    }
}
