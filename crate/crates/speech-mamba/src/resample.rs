//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use crate::error::{Error, Result};

/// Zero crossings of the sinc kept on each side, at the output bandwidth.
const HALF_ZEROS: usize = 32;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order 0.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    let q = x * x / 4.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Precomputed filter bank for one `src -> dst` conversion.
pub struct Resampler {
    up: usize,
    down: usize,
    half: usize,
    /// `up` phases of `2 * half` taps; phase `p` is the fractional offset `p / up`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(src_rate: u32, dst_rate: u32) -> Result<Resampler> {
        if src_rate == 0 || dst_rate == 0 {
            return Err(Error::InvalidInput(format!("sample rates must be positive, got {src_rate} -> {dst_rate}")));
        }
        let g = gcd(src_rate as u64, dst_rate as u64);
        let (up, down) = ((dst_rate as u64 / g) as usize, (src_rate as u64 / g) as usize);
        let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half = (HALF_ZEROS as f64 / cutoff).ceil() as usize;
        let norm = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (0..2 * half)
                    .map(|j| {
                        // input sample i0 + j - half + 1 sits at distance t from the output instant
                        let t = (j as f64 - half as f64 + 1.0) - frac;
                        let r = t / half as f64;
                        if r.abs() >= 1.0 {
                            return 0.0;
                        }
                        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                        cutoff * sinc(cutoff * t) * w
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|v| *v /= sum);
                taps
            })
            .collect();
        Ok(Resampler { up, down, half, phases })
    }

    /// Output holds `round(len * dst / src)` samples; the signal is taken as
    /// zero outside its support.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let out_len = ((x.len() as u128 * self.up as u128 * 2 + self.down as u128) / (2 * self.down as u128)) as usize;
        let n = x.len() as isize;
        (0..out_len)
            .map(|o| {
                let pos = o * self.down;
                let (i0, phase) = ((pos / self.up) as isize, pos % self.up);
                let taps = &self.phases[phase];
                let start = i0 - self.half as isize + 1;
                let mut acc = 0.0;
                for (j, &h) in taps.iter().enumerate() {
                    let i = start + j as isize;
                    if (0..n).contains(&i) {
                        acc += h * x[i as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Resamples `samples` from `src_rate` to `dst_rate`. Equal rates return the input unchanged.
pub fn resample(samples: &[f64], src_rate: u32, dst_rate: u32) -> Result<Vec<f64>> {
    if src_rate == dst_rate && src_rate > 0 {
        return Ok(samples.to_vec());
    }
    Ok(Resampler::new(src_rate, dst_rate)?.process(samples))
}
