//! Log-Mel filterbank features and their on-disk cache format.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_fmin: f64,
    /// Defaults to the Nyquist frequency.
    pub mel_fmax: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            sample_rate: 16_000,
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_fmin: 0.0,
            mel_fmax: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn win_len(&self) -> usize {
        (self.sample_rate as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("fbank config: {m}")));
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        if self.win_ms < self.hop_ms || self.hop_len() == 0 {
            return bad(format!("window {} ms shorter than hop {} ms", self.win_ms, self.hop_ms));
        }
        if self.fft_size < self.win_len() {
            return bad(format!("fft size {} below window of {} samples", self.fft_size, self.win_len()));
        }
        if !(0.0 <= self.mel_fmin && self.mel_fmin < self.mel_fmax && self.mel_fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!("mel range {}..{} Hz", self.mel_fmin, self.mel_fmax));
        }
        if self.log_floor <= 0.0 {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }

    /// `1 + (len - win) / hop` frames, none when shorter than a window.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.win_len() {
            0
        } else {
            1 + (len - self.win_len()) / self.hop_len()
        }
    }
}

/// `[frames, dim]` row-major features.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Per-utterance mean and variance normalisation of every dimension.
    pub fn normalized(&self) -> Features {
        let mut out = self.clone();
        let n = self.frames.max(1) as f64;
        for k in 0..self.dim {
            let mean = (0..self.frames).map(|t| self.data[t * self.dim + k]).sum::<f64>() / n;
            let var = (0..self.frames)
                .map(|t| (self.data[t * self.dim + k] - mean).powi(2))
                .sum::<f64>()
                / n;
            let inv = 1.0 / (var.sqrt() + 1e-5);
            for t in 0..self.frames {
                out.data[t * self.dim + k] = (self.data[t * self.dim + k] - mean) * inv;
            }
        }
        out
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Reusable window, filterbank and FFT plan.
pub struct Fbank {
    cfg: FbankConfig,
    window: Vec<f64>,
    /// Per Mel band: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl Fbank {
    pub fn new(cfg: FbankConfig) -> Result<Fbank> {
        cfg.validate()?;
        let n = cfg.win_len();
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let bins = cfg.fft_size / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let filters = (0..cfg.n_mels)
            .map(|j| {
                let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
                let weights: Vec<(usize, f64)> = (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(start, _)) => (start, weights.iter().map(|&(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Fbank {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    /// 16 kHz (or the configured rate) mono samples to log-Mel frames.
    pub fn compute(&self, samples: &[f64]) -> Result<Features> {
        let (win, hop) = (self.cfg.win_len(), self.cfg.hop_len());
        let frames = self.cfg.num_frames(samples.len());
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "{} samples is shorter than one {win}-sample window",
                samples.len()
            )));
        }
        let dim = self.cfg.n_mels;
        let mut data = Vec::with_capacity(frames * dim);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut mag = vec![0.0; self.cfg.fft_size / 2 + 1];
        for t in 0..frames {
            let frame = &samples[t * hop..t * hop + win];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(if i < win { frame[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (start, w) in &self.filters {
                let e: f64 = w.iter().zip(&mag[*start..]).map(|(w, m)| w * m).sum();
                data.push(e.max(self.cfg.log_floor).ln());
            }
        }
        Ok(Features { frames, dim, data })
    }
}

/// One-shot [`Fbank::compute`].
pub fn fbank(samples: &[f64], cfg: &FbankConfig) -> Result<Features> {
    Fbank::new(cfg.clone())?.compute(samples)
}

/// Cache blob: `T: i32`, `D: i32`, then `T * D` little-endian `f32`.
pub fn encode_features(f: &Features) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * f.data.len());
    out.extend_from_slice(&(f.frames as i32).to_le_bytes());
    out.extend_from_slice(&(f.dim as i32).to_le_bytes());
    for &v in &f.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Features> {
    let bad = |m: &str| Error::InvalidInput(format!("feature cache: {m}"));
    if bytes.len() < 8 {
        return Err(bad("shorter than its header"));
    }
    let t = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let d = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if t < 0 || d < 0 {
        return Err(bad("negative dimension"));
    }
    let (t, d) = (t as usize, d as usize);
    if bytes.len() != 8 + 4 * t * d {
        return Err(bad(&format!("{} payload bytes for {t} x {d}", bytes.len() - 8)));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Features { frames: t, dim: d, data })
}

pub fn write_features(path: &Path, f: &Features) -> Result<()> {
    std::fs::write(path, encode_features(f)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Features> {
    decode_features(&std::fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        let cfg = FbankConfig::default();
        let f = fbank(&vec![0.1; 16000], &cfg).unwrap();
        assert_eq!((f.frames, f.dim), (98, 80));
        assert!(fbank(&vec![0.0; 399], &cfg).is_err());
        assert_eq!(fbank(&vec![0.0; 400], &cfg).unwrap().frames, 1);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FbankConfig::default();
        let f = fbank(&vec![0.0; 4000], &cfg).unwrap();
        assert!(f.data.iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn doubling_amplitude_adds_ln2() {
        let cfg = FbankConfig::default();
        let x: Vec<f64> = (0..8000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = fbank(&x, &cfg).unwrap();
        let b = fbank(&x2, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        let mut above = 0;
        for (u, v) in a.data.iter().zip(&b.data) {
            if *u > floor + 1.0 {
                assert!((v - u - 2f64.ln()).abs() < 1e-9);
                above += 1;
            }
        }
        assert!(above > a.data.len() / 2);
    }

    #[test]
    fn tone_lands_in_its_band() {
        let cfg = FbankConfig::default();
        let x: Vec<f64> = (0..16000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let f = fbank(&x, &cfg).unwrap();
        let row = f.row(10);
        let best = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let centre = |j: usize| {
            let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
            mel_to_hz(lo + (hi - lo) * (j + 1) as f64 / 81.0)
        };
        assert!((centre(best) - 1000.0).abs() < 60.0, "band {best} at {} Hz", centre(best));
    }

    #[test]
    fn cache_round_trip() {
        let f = Features {
            frames: 2,
            dim: 3,
            data: vec![0.5, -1.25, 3.0, 0.0, 1e-3, -7.5],
        };
        let back = decode_features(&encode_features(&f)).unwrap();
        assert_eq!((back.frames, back.dim), (2, 3));
        for (a, b) in f.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        assert!(decode_features(&encode_features(&f)[..10]).is_err());
    }
}
