//! First-order linear recurrences `h_t = a_t * h_{t-1} + b_t` as scans.
//!
//! An element `(a, b)` is the affine map `h -> a*h + b`. Composing "first
//! `e1`, then `e2`" gives `(a1*a2, a2*b1 + b2)`, which is associative but not
//! commutative, so every scan below keeps left-to-right order.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub const IDENTITY: ScanElement = ScanElement { a: 1.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> ScanElement {
        ScanElement { a, b }
    }
}

/// `first` applied before `second`.
#[inline]
pub fn combine(first: ScanElement, second: ScanElement) -> ScanElement {
    ScanElement {
        a: first.a * second.a,
        b: second.a * first.b + second.b,
    }
}

/// In-place inclusive scan, one element after the other.
pub fn scan_sequential(elems: &mut [ScanElement]) {
    for t in 1..elems.len() {
        elems[t] = combine(elems[t - 1], elems[t]);
    }
}

/// Visits the `(left, right)` index pairs of the work-efficient up-sweep /
/// down-sweep tree in execution order. Pairs within one level touch disjoint
/// `right` slots and may run in parallel.
pub fn for_each_tree_step(n: usize, mut step: impl FnMut(usize, usize)) {
    if n < 2 {
        return;
    }
    let mut offset = 1;
    while offset < n {
        let mut i = 2 * offset - 1;
        while i < n {
            step(i - offset, i);
            i += 2 * offset;
        }
        offset *= 2;
    }
    offset /= 2;
    while offset >= 1 {
        let mut i = 3 * offset - 1;
        while i < n {
            step(i - offset, i);
            i += 2 * offset;
        }
        offset /= 2;
    }
}

/// In-place inclusive scan over the up-sweep/down-sweep tree; `O(n)` combines,
/// `O(log n)` levels.
pub fn scan_parallel(elems: &mut [ScanElement]) {
    for_each_tree_step(elems.len(), |l, r| {
        elems[r] = combine(elems[l], elems[r]);
    });
}

/// Number of combines `scan_parallel` performs on `n` elements.
pub fn parallel_combine_count(n: usize) -> usize {
    let mut c = 0;
    for_each_tree_step(n, |_, _| c += 1);
    c
}

/// Materialized scan inputs, row-major:
/// `a_bar`, `b_bar: [B, T, Di, N]`, `c: [B, T, N]`, `x: [B, T, Di]`, `d: [Di]`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub a_bar: &'a [f64],
    pub b_bar: &'a [f64],
    pub c: &'a [f64],
    pub x: &'a [f64],
    pub d: &'a [f64],
}

impl ScanInputs<'_> {
    fn lane(&self, b: usize, ch: usize, n: usize, out: &mut Vec<ScanElement>) {
        let (t_len, di, ns) = (self.len, self.channels, self.state);
        out.clear();
        for t in 0..t_len {
            let i4 = ((b * t_len + t) * di + ch) * ns + n;
            let xv = self.x[(b * t_len + t) * di + ch];
            out.push(ScanElement::new(self.a_bar[i4], self.b_bar[i4] * xv));
        }
    }

    fn run(&self, scan: fn(&mut [ScanElement])) -> Vec<f64> {
        let (bs, t_len, di, ns) = (self.batch, self.len, self.channels, self.state);
        let mut y = vec![0.0; bs * t_len * di];
        let mut lane = Vec::with_capacity(t_len);
        for b in 0..bs {
            for ch in 0..di {
                for n in 0..ns {
                    self.lane(b, ch, n, &mut lane);
                    scan(&mut lane);
                    for (t, e) in lane.iter().enumerate() {
                        y[(b * t_len + t) * di + ch] += self.c[(b * t_len + t) * ns + n] * e.b;
                    }
                }
                for t in 0..t_len {
                    let i = (b * t_len + t) * di + ch;
                    y[i] += self.d[ch] * self.x[i];
                }
            }
        }
        y
    }
}

/// `h_t = a_bar_t * h_{t-1} + b_bar_t * x_t`, `y_t = <c_t, h_t> + d * x_t`,
/// `h_0 = 0`, evaluated step by step.
pub fn ssm_scan_sequential(inputs: &ScanInputs<'_>) -> Vec<f64> {
    inputs.run(scan_sequential)
}

/// Same recurrence as [`ssm_scan_sequential`] via the tree scan.
pub fn ssm_scan_parallel(inputs: &ScanInputs<'_>) -> Vec<f64> {
    inputs.run(scan_parallel)
}
