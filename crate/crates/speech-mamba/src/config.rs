//! Flat `key = value` run configuration.
//!
//! Training keys are bare (`epochs`, `alpha`, ...); model keys carry a
//! `model.` prefix and feature keys an `fbank.` prefix. `model.preset`
//! (`base`, `transformer`, `tiny`) resets every model key, so it should come
//! first. `#` starts a comment. Unknown keys and malformed values are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use speech_mamba_core::model::ModelConfig;
use speech_mamba_core::ssm::ScanMode;

use crate::error::{io_err, Error, Result};
use crate::fbank::FbankConfig;

pub const SEED_ENV: &str = "SPEECH_MAMBA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMetric {
    DevLoss,
    DevWer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Most utterances per batch.
    pub batch_size: usize,
    /// Seconds of audio per batch.
    pub max_batch_length: f64,
    pub grad_accum: usize,
    pub alpha: f64,
    pub label_smoothing: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
    pub avg_top_k: usize,
    pub selection_metric: SelectionMetric,
    /// Stop after this many optimiser steps; 0 means no limit.
    pub max_steps: u64,
    pub normalize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            max_batch_length: 500.0,
            grad_accum: 4,
            alpha: 0.3,
            label_smoothing: 0.1,
            peak_lr: 1e-3,
            warmup_steps: 25_000,
            clip_norm: 5.0,
            seed: 0,
            avg_top_k: 10,
            selection_metric: SelectionMetric::DevLoss,
            max_steps: 0,
            normalize_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.grad_accum < 1 {
            return Err("grad_accum must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} not in [0, 1]", self.alpha));
        }
        if self.avg_top_k < 1 {
            return Err("avg_top_k must be >= 1".into());
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err("batch_size and epochs must be >= 1".into());
        }
        if !(self.max_batch_length > 0.0) {
            return Err("max_batch_length must be positive".into());
        }
        if !(self.peak_lr > 0.0) || self.warmup_steps == 0 {
            return Err("peak_lr must be positive and warmup_steps >= 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `vocab_size` is overwritten by the tokenizer unless set explicitly.
    pub model: ModelConfig,
    pub fbank: FbankConfig,
    vocab_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::base(0),
            fbank: FbankConfig::default(),
            vocab_explicit: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>()))
}

fn parse_pair(key: &str, value: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| format!("{key}: expected two comma-separated integers, got {value:?}"))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config {
                origin: format!("{origin}:{}", i + 1),
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {raw:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("{key} set twice")));
            }
            cfg.set(key, value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let err = |message: String| Error::Config {
                origin: "override".into(),
                message,
            };
            let (k, v) = o.split_once('=').ok_or_else(|| err(format!("expected key=value, got {o:?}")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Takes the seed from `value` (the environment variable's content) if present.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = parse(SEED_ENV, v.trim()).map_err(|message| Error::Config {
                origin: SEED_ENV.into(),
                message,
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let m = &mut self.model;
        let f = &mut self.fbank;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_batch_length" => t.max_batch_length = parse(key, value)?,
            "grad_accum" => t.grad_accum = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "avg_top_k" => t.avg_top_k = parse(key, value)?,
            "selection_metric" => {
                t.selection_metric = match value {
                    "dev_loss" => SelectionMetric::DevLoss,
                    "dev_wer" => SelectionMetric::DevWer,
                    _ => return Err(format!("selection_metric must be dev_loss or dev_wer, got {value:?}")),
                }
            }
            "max_steps" => t.max_steps = parse(key, value)?,
            "normalize_features" => t.normalize_features = parse(key, value)?,
            "model.preset" => {
                let vocab = m.vocab_size;
                *m = match value {
                    "base" => ModelConfig::base(vocab),
                    "transformer" => ModelConfig::transformer_baseline(vocab),
                    "tiny" => ModelConfig::tiny(vocab),
                    _ => return Err(format!("model.preset must be base, transformer or tiny, got {value:?}")),
                };
            }
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.num_heads" => m.num_heads = parse(key, value)?,
            "model.encoder_blocks" => m.encoder_blocks = parse(key, value)?,
            "model.decoder_blocks" => m.decoder_blocks = parse(key, value)?,
            "model.conv_width" => m.conv_width = parse(key, value)?,
            "model.ssm_state" => m.ssm_state = parse(key, value)?,
            "model.expand" => m.expand = parse(key, value)?,
            "model.vocab_size" => {
                m.vocab_size = parse(key, value)?;
                self.vocab_explicit = true;
            }
            "model.dropout_p" => m.dropout_p = parse(key, value)?,
            "model.feature_dim" => m.feature_dim = parse(key, value)?,
            "model.frontend_channels" => m.frontend_channels = parse_pair(key, value)?,
            "model.transformer_encoder_blocks" => m.transformer_encoder_blocks = parse(key, value)?,
            "model.transformer_decoder_blocks" => m.transformer_decoder_blocks = parse(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, value)?,
            "model.mamba_encoder" => m.mamba_encoder = parse(key, value)?,
            "model.mamba_decoder" => m.mamba_decoder = parse(key, value)?,
            "model.use_s2s" => m.use_s2s = parse(key, value)?,
            "model.encoder_pos_enc" => m.encoder_pos_enc = parse(key, value)?,
            "model.scan_mode" => {
                m.scan_mode = match value {
                    "parallel" => ScanMode::Parallel,
                    "sequential" => ScanMode::Sequential,
                    _ => return Err(format!("model.scan_mode must be parallel or sequential, got {value:?}")),
                }
            }
            "fbank.sample_rate" => f.sample_rate = parse(key, value)?,
            "fbank.win_ms" => f.win_ms = parse(key, value)?,
            "fbank.hop_ms" => f.hop_ms = parse(key, value)?,
            "fbank.fft_size" => f.fft_size = parse(key, value)?,
            "fbank.mel_fmin" => f.mel_fmin = parse(key, value)?,
            "fbank.mel_fmax" => f.mel_fmax = parse(key, value)?,
            "fbank.log_floor" => f.log_floor = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Fixes the vocabulary size from the tokenizer and checks every field.
    pub fn resolve(&mut self, tokenizer_vocab: usize) -> Result<()> {
        let err = |message: String| Error::Config {
            origin: "resolved config".into(),
            message,
        };
        if self.vocab_explicit && self.model.vocab_size != tokenizer_vocab {
            return Err(err(format!(
                "model.vocab_size {} disagrees with the token table's {tokenizer_vocab}",
                self.model.vocab_size
            )));
        }
        self.model.vocab_size = tokenizer_vocab;
        self.fbank.n_mels = self.model.feature_dim;
        self.train.validate().map_err(err)?;
        self.model.validate()?;
        self.fbank.validate()?;
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let (t, m, f) = (&self.train, &self.model, &self.fbank);
        let mut s = String::new();
        let metric = match t.selection_metric {
            SelectionMetric::DevLoss => "dev_loss",
            SelectionMetric::DevWer => "dev_wer",
        };
        let scan = match m.scan_mode {
            ScanMode::Parallel => "parallel",
            ScanMode::Sequential => "sequential",
        };
        let rows: Vec<(&str, String)> = vec![
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_batch_length", t.max_batch_length.to_string()),
            ("grad_accum", t.grad_accum.to_string()),
            ("alpha", t.alpha.to_string()),
            ("label_smoothing", t.label_smoothing.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("seed", t.seed.to_string()),
            ("avg_top_k", t.avg_top_k.to_string()),
            ("selection_metric", metric.into()),
            ("max_steps", t.max_steps.to_string()),
            ("normalize_features", t.normalize_features.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.num_heads", m.num_heads.to_string()),
            ("model.encoder_blocks", m.encoder_blocks.to_string()),
            ("model.decoder_blocks", m.decoder_blocks.to_string()),
            ("model.conv_width", m.conv_width.to_string()),
            ("model.ssm_state", m.ssm_state.to_string()),
            ("model.expand", m.expand.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.dropout_p", m.dropout_p.to_string()),
            ("model.feature_dim", m.feature_dim.to_string()),
            (
                "model.frontend_channels",
                format!("{},{}", m.frontend_channels.0, m.frontend_channels.1),
            ),
            ("model.transformer_encoder_blocks", m.transformer_encoder_blocks.to_string()),
            ("model.transformer_decoder_blocks", m.transformer_decoder_blocks.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.mamba_encoder", m.mamba_encoder.to_string()),
            ("model.mamba_decoder", m.mamba_decoder.to_string()),
            ("model.use_s2s", m.use_s2s.to_string()),
            ("model.encoder_pos_enc", m.encoder_pos_enc.to_string()),
            ("model.scan_mode", scan.into()),
            ("fbank.sample_rate", f.sample_rate.to_string()),
            ("fbank.win_ms", f.win_ms.to_string()),
            ("fbank.hop_ms", f.hop_ms.to_string()),
            ("fbank.fft_size", f.fft_size.to_string()),
            ("fbank.mel_fmin", f.mel_fmin.to_string()),
            ("fbank.mel_fmax", f.mel_fmax.to_string()),
            ("fbank.log_floor", f.log_floor.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_recipe() {
        let c = RunConfig::default();
        assert_eq!(
            (c.train.epochs, c.train.batch_size, c.train.grad_accum, c.train.avg_top_k),
            (100, 32, 4, 10)
        );
        assert_eq!((c.train.alpha, c.train.max_batch_length), (0.3, 500.0));
        assert_eq!(c.train.selection_metric, SelectionMetric::DevLoss);
    }

    #[test]
    fn parses_and_round_trips() {
        let text = "# smoke\nmodel.preset = tiny\nmodel.d_model = 64 # wider\nalpha=0.5\nmodel.frontend_channels = 8, 8\nselection_metric = dev_wer\n";
        let mut c = RunConfig::parse(text, "c").unwrap();
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.frontend_channels, (8, 8));
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.train.selection_metric, SelectionMetric::DevWer);
        c.resolve(10).unwrap();
        let back = RunConfig::parse(&c.to_text(), "round trip").unwrap();
        assert_eq!(back.train, c.train);
        assert_eq!(back.model, c.model);
    }

    #[test]
    fn schema_violations_are_reported() {
        let e = RunConfig::parse("epochs = 3\nlearning_rate = 1\n", "c").unwrap_err();
        assert!(e.to_string().contains("c:2") && e.to_string().contains("learning_rate"), "{e}");
        assert!(RunConfig::parse("epochs = many\n", "c").is_err());
        assert!(RunConfig::parse("epochs\n", "c").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2\n", "c").is_err());
        let mut c = RunConfig::parse("grad_accum = 0\n", "c").unwrap();
        assert!(c.resolve(10).is_err());
        let mut c = RunConfig::parse("model.vocab_size = 12\n", "c").unwrap();
        assert!(c.resolve(10).is_err());
        let mut c = RunConfig::parse("model.use_s2s = false\nmodel.mamba_decoder = false\n", "c").unwrap();
        assert!(c.resolve(10).is_err());
    }

    #[test]
    fn overrides_and_environment() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["seed=4".into(), "model.use_s2s=false".into()]).unwrap();
        assert_eq!(c.train.seed, 4);
        assert!(!c.model.use_s2s);
        c.apply_seed_env(Some("17")).unwrap();
        assert_eq!(c.train.seed, 17);
        c.apply_seed_env(None).unwrap();
        assert_eq!(c.train.seed, 17);
        assert!(c.apply_seed_env(Some("x")).is_err());
        assert!(c.apply_overrides(&["nope=1".into()]).is_err());
    }
}
