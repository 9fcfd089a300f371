use proptest::prelude::*;

use speech_mamba_core::decode::{align, greedy_ctc_decode, CtcPrefixScorer};
use speech_mamba_core::nn::Init;
use speech_mamba_core::objectives::{ctc_loss_per_utterance, joint_loss, s2s_loss};
use speech_mamba_core::ssm::{selective_scan, ssm_scan_parallel, ssm_scan_sequential, ScanInputs, ScanMode};
use speech_mamba_core::{Tensor, EOS_ID};

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut init = Init::new(seed);
    (0..n).map(|_| init.uniform_in(lo, hi)).collect()
}

fn log_softmax_rows(raw: &[f64], classes: usize) -> Vec<f64> {
    raw.chunks(classes)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect()
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != 0 {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Log-probability that `frames` frames collapse to `target`, by summing
/// over every path.
fn enumerate_ctc(lp: &[f64], frames: usize, classes: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == frames {
                return total.ln();
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn ctc_case() -> impl Strategy<Value = (usize, usize, Vec<usize>, u64)> {
    (1usize..=6, 1usize..=3, any::<u64>()).prop_flat_map(|(frames, labels, seed)| {
        let target = prop::collection::vec(1..=labels, 0..=3usize.min(frames));
        (Just(frames), Just(labels + 1), target, Just(seed))
    })
}

fn min_frames(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn parallel_scan_matches_sequential(
        len in prop::sample::select(vec![1usize, 2, 7, 64, 513]),
        batch in 1usize..=2,
        channels in 1usize..=3,
        state in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let n4 = batch * len * channels * state;
        let a_bar = uniform(seed, n4, 0.0, 1.0);
        let b_bar = uniform(seed ^ 1, n4, -1.0, 1.0);
        let c = uniform(seed ^ 2, batch * len * state, -1.0, 1.0);
        let x = uniform(seed ^ 3, batch * len * channels, -1.0, 1.0);
        let d = uniform(seed ^ 4, channels, -1.0, 1.0);
        let inputs = ScanInputs { batch, len, channels, state, a_bar: &a_bar, b_bar: &b_bar, c: &c, x: &x, d: &d };
        let seq = ssm_scan_sequential(&inputs);
        let par = ssm_scan_parallel(&inputs);
        for (s, p) in seq.iter().zip(&par) {
            prop_assert!((s - p).abs() < 1e-10);
        }

        let xt = Tensor::new(x.clone(), &[batch, len, channels]).unwrap();
        let delta = Tensor::new(uniform(seed ^ 5, batch * len * channels, 0.001, 2.0), &[batch, len, channels]).unwrap();
        let a = Tensor::new(uniform(seed ^ 6, channels * state, -3.0, -0.05), &[channels, state]).unwrap();
        let bs = Tensor::new(uniform(seed ^ 7, batch * len * state, -1.0, 1.0), &[batch, len, state]).unwrap();
        let cs = Tensor::new(c.clone(), &[batch, len, state]).unwrap();
        let dt = Tensor::new(d.clone(), &[channels]).unwrap();
        let y_seq = selective_scan(&xt, &delta, &a, &bs, &cs, &dt, ScanMode::Sequential).unwrap().to_vec();
        let y_par = selective_scan(&xt, &delta, &a, &bs, &cs, &dt, ScanMode::Parallel).unwrap().to_vec();
        for (s, p) in y_seq.iter().zip(&y_par) {
            prop_assert!((s - p).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(240))]

    #[test]
    fn ctc_matches_enumeration((frames, classes, target, seed) in ctc_case()) {
        let lp = log_softmax_rows(&uniform(seed, frames * classes, -3.0, 3.0), classes);
        let oracle = enumerate_ctc(&lp, frames, classes, &target);
        let t = Tensor::new(lp.clone(), &[1, frames, classes]).unwrap();
        let got = ctc_loss_per_utterance(&t, &[target.clone()], &[frames]);
        if min_frames(&target) > frames {
            prop_assert!(got.is_err());
            prop_assert_eq!(oracle, f64::NEG_INFINITY);
        } else {
            let loss = got.unwrap().item();
            prop_assert!((loss + oracle).abs() < 1e-8, "loss {} oracle {}", loss, -oracle);
        }
    }

    #[test]
    fn ctc_invariant_under_relabeling((frames, classes, target, seed) in ctc_case(), shift in 0usize..3) {
        prop_assume!(min_frames(&target) <= frames && classes > 2);
        let lp = log_softmax_rows(&uniform(seed, frames * classes, -3.0, 3.0), classes);
        let labels = classes - 1;
        let relabel = |k: usize| if k == 0 { 0 } else { (k - 1 + shift) % labels + 1 };
        let mut permuted = vec![0.0; lp.len()];
        for t in 0..frames {
            for k in 0..classes {
                permuted[t * classes + relabel(k)] = lp[t * classes + k];
            }
        }
        let moved: Vec<usize> = target.iter().map(|&k| relabel(k)).collect();
        let a = ctc_loss_per_utterance(&Tensor::new(lp, &[1, frames, classes]).unwrap(), &[target], &[frames]).unwrap().item();
        let b = ctc_loss_per_utterance(&Tensor::new(permuted, &[1, frames, classes]).unwrap(), &[moved], &[frames]).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prefix_scores_agree_with_ctc((frames, classes, target, seed) in ctc_case()) {
        prop_assume!(frames <= 5 && min_frames(&target) <= frames);
        // extra EOS/BOS columns so label ids stay clear of the reserved ones
        let shift = EOS_ID;
        let wide = classes + shift;
        let lp = log_softmax_rows(&uniform(seed, frames * wide, -3.0, 3.0), wide);
        let target: Vec<usize> = target.iter().map(|&k| k + shift).collect();
        let scorer = CtcPrefixScorer::new(&lp, frames, wide).unwrap();
        let full = scorer.state_of(&target).full_score();
        let loss = ctc_loss_per_utterance(&Tensor::new(lp.clone(), &[1, frames, wide]).unwrap(), &[target.clone()], &[frames])
            .unwrap()
            .item();
        prop_assert!((full.exp() - (-loss).exp()).abs() < 1e-10);

        for cut in 0..=target.len() {
            let state = scorer.state_of(&target[..cut]);
            let mut mass = scorer.extend(&state, EOS_ID).0.exp();
            for c in 1 + shift..wide {
                let (s, _) = scorer.extend(&state, c);
                prop_assert!(s <= state.score + 1e-12);
                mass += s.exp();
            }
            prop_assert!(mass <= state.score.exp() + 1e-10);
        }
    }

    #[test]
    fn s2s_is_nonnegative(seed in any::<u64>(), smoothing in 0.0f64..0.5, len in 1usize..6) {
        let v = 5;
        let logits = Tensor::new(uniform(seed, len * v, -4.0, 4.0), &[1, len, v]).unwrap();
        let targets: Vec<usize> = (0..len).map(|i| 1 + (seed as usize + i) % (v - 1)).collect();
        prop_assert!(s2s_loss(&logits, &targets, smoothing, 0).unwrap().item() >= 0.0);
    }

    #[test]
    fn joint_loss_superposes(c1 in -5.0f64..5.0, s1 in -5.0f64..5.0, c2 in -5.0f64..5.0, s2 in -5.0f64..5.0, alpha in 0.0f64..=1.0) {
        let sum = joint_loss(c1 + c2, s1 + s2, alpha).unwrap();
        let parts = joint_loss(c1, s1, alpha).unwrap() + joint_loss(c2, s2, alpha).unwrap();
        prop_assert!((sum - parts).abs() < 1e-12);
        let scaled = joint_loss(3.0 * c1, 3.0 * s1, alpha).unwrap();
        prop_assert!((scaled - 3.0 * joint_loss(c1, s1, alpha).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wer_counts_are_consistent(
        a in prop::collection::vec(0u8..4, 0..8),
        b in prop::collection::vec(0u8..4, 0..8),
        c in prop::collection::vec(0u8..4, 0..8),
    ) {
        let ab = align(&a, &b);
        let ba = align(&b, &a);
        prop_assert_eq!(ab.errors(), ba.errors());
        prop_assert_eq!(ab.insertions as isize - ab.deletions as isize, b.len() as isize - a.len() as isize);
        prop_assert_eq!(align(&a, &a).errors(), 0);
        prop_assert!(align(&a, &c).errors() <= ab.errors() + align(&b, &c).errors());
        prop_assert!(ab.errors() <= a.len().max(b.len()));
    }

    #[test]
    fn greedy_inverts_planted_labeling(
        labels in prop::collection::vec(1usize..5, 0..6),
        repeats in prop::collection::vec(1usize..3, 6),
        blanks in prop::collection::vec(0usize..2, 7),
    ) {
        let classes = 5;
        let mut path = vec![0; blanks[0]];
        for (i, &k) in labels.iter().enumerate() {
            let sep = if i > 0 && labels[i - 1] == k { blanks[i + 1].max(1) } else { blanks[i + 1] };
            path.extend(std::iter::repeat(0).take(sep));
            path.extend(std::iter::repeat(k).take(repeats[i]));
        }
        let lp: Vec<f64> = path.iter().flat_map(|&k| (0..classes).map(move |c| if c == k { 0.0 } else { -30.0 })).collect();
        prop_assert_eq!(greedy_ctc_decode(&lp, classes), labels);
    }
}
