use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }
}

/// Minimum-edit alignment of `hyp` against `reference` with unit costs.
/// Among equal-cost alignments the one with fewer substitutions wins, then
/// fewer deletions.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, S, I, D) per cell, two rolling rows
    type Cell = (usize, usize, usize, usize);
    let mut prev: alloc::vec::Vec<Cell> = (0..=m).map(|j| (j, 0, j, 0)).collect();
    let mut cur = prev.clone();
    for i in 1..=n {
        cur[0] = (i, 0, 0, i);
        for j in 1..=m {
            let (c, s, ins, d) = prev[j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (c, s, ins, d)
            } else {
                (c + 1, s + 1, ins, d)
            };
            let (c, s, ins, d) = cur[j - 1];
            let left = (c + 1, s, ins + 1, d);
            let (c, s, ins, d) = prev[j];
            let up = (c + 1, s, ins, d + 1);
            cur[j] = [diag, up, left]
                .into_iter()
                .min_by_key(|&(c, s, _, d)| (c, s, d))
                .expect("three candidates");
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    let (_, substitutions, insertions, deletions) = prev[m];
    EditCounts {
        substitutions,
        insertions,
        deletions,
        ref_words: n,
    }
}

/// Corpus word error rate `(S + I + D) / total reference words`, with the
/// summed counts.
pub fn word_error_rate<R, H, T>(refs: &[R], hyps: &[H]) -> Result<(f64, EditCounts)>
where
    R: AsRef<[T]>,
    H: AsRef<[T]>,
    T: PartialEq,
{
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = EditCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(align(r.as_ref(), h.as_ref()));
    }
    if total.ref_words == 0 {
        return Err(Error::EmptyReference);
    }
    Ok((total.errors() as f64 / total.ref_words as f64, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn examples() {
        let (wer, _) = word_error_rate(&[w("a b c")], &[w("a b c")]).unwrap();
        assert_eq!(wer, 0.0);
        let (wer, c) = word_error_rate(&[w("a b c")], &[w("")]).unwrap();
        assert_eq!((wer, c.deletions), (1.0, 3));
        let (wer, c) = word_error_rate(&[w("a b c")], &[w("a x c d")]).unwrap();
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 1, 0));
        assert!((wer - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_reference_corpus() {
        let refs: Vec<Vec<&str>> = vec![vec![]];
        assert!(matches!(word_error_rate(&refs, &[w("a")]), Err(Error::EmptyReference)));
        assert!(word_error_rate(&[w("a")], &[w("a"), w("b")]).is_err());
    }
}
