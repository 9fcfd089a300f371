//! Synthetic tone corpus: every symbol is a fixed-pitch tone burst, so a
//! transcript can be read off the spectrogram.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, Audio};
use crate::error::Result;
use crate::manifest::{write_manifest, UtteranceRecord};

pub const ALPHABET: [char; 4] = ['A', 'B', 'C', 'D'];
pub const SAMPLE_RATE: u32 = 16_000;
const TONE_S: f64 = 0.12;
const GAP_S: f64 = 0.03;
const EDGE_S: f64 = 0.1;

/// Pitch of each symbol, space included.
pub fn tone_hz(c: char) -> f64 {
    match c {
        'A' => 400.0,
        'B' => 700.0,
        'C' => 1000.0,
        'D' => 1300.0,
        _ => 1900.0,
    }
}

/// Tone bursts separated by short silences, with a little noise.
pub fn render(text: &str, rng: &mut ChaCha8Rng) -> Audio {
    let rate = SAMPLE_RATE as f64;
    let tone = (TONE_S * rate) as usize;
    let gap = (GAP_S * rate) as usize;
    let edge = (EDGE_S * rate) as usize;
    let mut samples = vec![0.0; edge];
    for c in text.chars() {
        let f = tone_hz(c);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        samples.extend((0..tone).map(|i| {
            let ramp = (i.min(tone - 1 - i) as f64 / 80.0).min(1.0);
            0.5 * ramp * (std::f64::consts::TAU * f * i as f64 / rate + phase).sin()
        }));
        samples.extend(std::iter::repeat_n(0.0, gap));
    }
    samples.extend(std::iter::repeat_n(0.0, edge));
    for s in &mut samples {
        *s += rng.random_range(-1e-3..1e-3);
    }
    Audio {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

/// Two or three words of one to three letters.
pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let words = rng.random_range(2..=3);
    (0..words)
        .map(|_| {
            let len = rng.random_range(1..=3);
            (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tone_corpus(n: usize, seed: u64) -> Vec<(UtteranceRecord, Audio)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let text = random_text(&mut rng);
            let audio = render(&text, &mut rng);
            let id = format!("tone-{k:04}");
            let rec = UtteranceRecord {
                audio_path: format!("{id}.wav"),
                id,
                duration_s: audio.duration_s(),
                speaker: format!("spk{}", k % 4),
                order_key: format!("{k:04}"),
                text,
            };
            (rec, audio)
        })
        .collect()
}

/// Writes the corpus' audio and `manifest.jsonl` under `dir`.
pub fn write_tone_corpus(dir: &Path, n: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let corpus = tone_corpus(n, seed);
    for (rec, audio) in &corpus {
        write_wav(&dir.join(&rec.audio_path), audio)?;
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<UtteranceRecord> = corpus.into_iter().map(|(r, _)| r).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbank::{fbank, FbankConfig};

    #[test]
    fn corpus_is_deterministic() {
        let a = tone_corpus(3, 9);
        let b = tone_corpus(3, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|(r, _)| r.text.chars().all(|c| c == ' ' || ALPHABET.contains(&c))));
    }

    #[test]
    fn symbols_are_separable_in_the_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FbankConfig::default();
        let band = |c: char| {
            let f = fbank(&render(&c.to_string(), &mut rng).samples, &cfg).unwrap();
            let row = f.row(f.frames / 2);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
        };
        let bands: Vec<usize> = "ABCD ".chars().map(band).collect();
        assert!(bands.windows(2).all(|w| w[0] < w[1]), "{bands:?}");
    }
}
