//! Corpus loading, the epoch loop, per-epoch checkpoints and averaging.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use speech_mamba_core::checkpoint::{average, Checkpoint};
use speech_mamba_core::decode::word_error_rate;
use speech_mamba_core::model::{ModelConfig, SpeechMambaModel};
use speech_mamba_core::train::{
    check_alignable, dynamic_batches, evaluate, greedy_decode_batch, select_top_k, Batch, NoamSchedule, ObjectiveConfig,
    StepReport, Trainer, TrainerConfig,
};

use crate::audio::read_audio;
use crate::config::{RunConfig, SelectionMetric};
use crate::error::{io_err, Error, Result};
use crate::fbank::{read_features, write_features, Fbank, Features};
use crate::manifest::{read_manifest, resolve_audio, UtteranceRecord};
use crate::resample::resample;
use crate::tokenizer::Tokenizer;

pub const METRICS_HEADER: &str = "step,epoch,ctc,s2s,combined,lr,grad_norm";
pub const CHECKPOINTS_FILE: &str = "checkpoints.jsonl";
pub const AVERAGED_FILE: &str = "averaged.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const TOKENS_FILE: &str = "tokens.txt";
pub const METRICS_FILE: &str = "metrics.csv";

/// One utterance ready for batching.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub duration_s: f64,
    pub features: Features,
    pub tokens: Vec<usize>,
}

/// Reads audio, resamples it to the feature rate and computes features
/// (through `cache_dir` when given).
pub fn extract_features(manifest: &Path, rec: &UtteranceRecord, fbank: &Fbank, cache_dir: Option<&Path>) -> Result<Features> {
    let cached = cache_dir.map(|d| d.join(format!("{}.fbk", rec.id)));
    if let Some(p) = &cached {
        if p.exists() {
            return read_features(p);
        }
    }
    let audio = read_audio(&resolve_audio(manifest, rec))?;
    let samples = resample(&audio.samples, audio.sample_rate, fbank.config().sample_rate)?;
    let f = fbank.compute(&samples)?;
    if let Some(p) = &cached {
        write_features(p, &f)?;
    }
    Ok(f)
}

pub fn load_corpus(
    manifest: &Path,
    tokenizer: &Tokenizer,
    fbank: &Fbank,
    normalize: bool,
    cache_dir: Option<&Path>,
) -> Result<Vec<Utterance>> {
    if let Some(d) = cache_dir {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    read_manifest(manifest)?
        .into_iter()
        .map(|rec| {
            let f = extract_features(manifest, &rec, fbank, cache_dir)?;
            Ok(Utterance {
                tokens: tokenizer.tokenize(&rec.text)?,
                features: if normalize { f.normalized() } else { f },
                id: rec.id,
                text: rec.text,
                duration_s: rec.duration_s,
            })
        })
        .collect()
}

/// Duration-budgeted batches in corpus order, plus the ids of utterances
/// too long for any batch.
pub fn make_batches(utts: &[Utterance], max_duration: f64, max_size: usize) -> Result<(Vec<Batch>, Vec<String>)> {
    let durations: Vec<f64> = utts.iter().map(|u| u.duration_s).collect();
    let (groups, dropped) = dynamic_batches(&durations, max_duration, max_size);
    let batches = groups
        .into_iter()
        .map(|g| batch_of(&g.iter().map(|&i| &utts[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok((batches, dropped.into_iter().map(|i| utts[i].id.clone()).collect()))
}

pub fn batch_of(utts: &[&Utterance]) -> Result<Batch> {
    let dim = utts.first().map_or(0, |u| u.features.dim);
    let feats: Vec<Vec<f64>> = utts.iter().map(|u| u.features.data.clone()).collect();
    Ok(Batch::new(
        utts.iter().map(|u| u.id.clone()).collect(),
        &feats,
        dim,
        utts.iter().map(|u| u.tokens.clone()).collect(),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub dev_metric: f64,
    pub path: String,
}

/// Mean of the best `k` checkpoints by `dev_metric`. When fewer than `k`
/// exist all are used and a warning is returned.
pub fn average_checkpoints(metas: &[CheckpointMeta], k: usize) -> Result<(Checkpoint, Vec<CheckpointMeta>, Option<String>)> {
    let metrics: Vec<f64> = metas.iter().map(|m| m.dev_metric).collect();
    let (chosen, short) = select_top_k(&metrics, k)?;
    let picked: Vec<CheckpointMeta> = chosen.iter().map(|&i| metas[i].clone()).collect();
    let ckpts = picked
        .iter()
        .map(|m| {
            let p = Path::new(&m.path);
            Ok(Checkpoint::decode(&std::fs::read(p).map_err(io_err(p))?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let warning = short.then(|| format!("only {} checkpoints available for top-{k} averaging", metas.len()));
    Ok((average(&ckpts)?, picked, warning))
}

pub fn read_checkpoint_metas(path: &Path) -> Result<Vec<CheckpointMeta>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Training-set-free score of `model` on `dev`: combined loss or greedy
/// CTC word error rate.
pub fn dev_metric(
    model: &SpeechMambaModel,
    dev: &[Batch],
    dev_texts: &[Vec<String>],
    obj: &ObjectiveConfig,
    metric: SelectionMetric,
    tokenizer: &Tokenizer,
) -> Result<f64> {
    match metric {
        SelectionMetric::DevLoss => Ok(evaluate(model, dev, obj)?.combined),
        SelectionMetric::DevWer => Ok(greedy_wer(model, dev, dev_texts, tokenizer)?),
    }
}

/// Greedy CTC word error rate over `batches` against `texts`, one list of
/// words per utterance in batch order.
pub fn greedy_wer(model: &SpeechMambaModel, batches: &[Batch], texts: &[Vec<String>], tokenizer: &Tokenizer) -> Result<f64> {
    let mut hyps = Vec::new();
    for b in batches {
        for ids in greedy_decode_batch(model, b)? {
            hyps.push(tokenizer.detokenize(&ids).split_whitespace().map(String::from).collect::<Vec<_>>());
        }
    }
    Ok(word_error_rate(texts, &hyps)?.0)
}

pub fn words_of(batches: &[Batch], utts: &[Utterance]) -> Vec<Vec<String>> {
    let by_id: std::collections::HashMap<&str, &Utterance> = utts.iter().map(|u| (u.id.as_str(), u)).collect();
    batches
        .iter()
        .flat_map(|b| b.ids.iter())
        .map(|id| crate::tokenizer::normalize(&by_id[id.as_str()].text).split_whitespace().map(String::from).collect())
        .collect()
}

pub struct TrainOutcome {
    pub model: SpeechMambaModel,
    pub metas: Vec<CheckpointMeta>,
    pub averaged: PathBuf,
    pub steps: u64,
    pub skipped_batches: usize,
    pub dropped_utterances: Vec<String>,
    pub warnings: Vec<String>,
    pub reports: Vec<(usize, StepReport)>,
}

pub fn trainer_config(cfg: &RunConfig) -> TrainerConfig {
    TrainerConfig {
        objective: ObjectiveConfig {
            alpha: cfg.train.alpha,
            label_smoothing: cfg.train.label_smoothing,
        },
        schedule: NoamSchedule {
            peak_lr: cfg.train.peak_lr,
            warmup_steps: cfg.train.warmup_steps,
        },
        clip_norm: cfg.train.clip_norm,
    }
}

/// Runs the epoch loop and writes `metrics.csv`, one checkpoint per epoch,
/// `checkpoints.jsonl`, `averaged.ckpt`, `config.txt` and `tokens.txt` to
/// `out_dir`. Progress and warnings go to `log`. The returned model holds
/// the averaged parameters.
pub fn run_training(
    cfg: &RunConfig,
    tokenizer: &Tokenizer,
    train: &[Utterance],
    dev: &[Utterance],
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    let model_cfg: ModelConfig = cfg.model.clone();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    };
    write(CONFIG_FILE, cfg.to_text())?;
    write(TOKENS_FILE, tokenizer.to_table())?;

    let model = SpeechMambaModel::new(model_cfg, tc.seed)?;
    let tcfg = trainer_config(cfg);
    let mut trainer = Trainer::new(&model, tcfg, tc.seed.wrapping_add(1));
    let mut warnings = Vec::new();
    let mut warn = |log: &mut dyn Write, w: String| {
        let _ = writeln!(log, "warning: {w}");
        warnings.push(w);
    };

    let (mut batches, dropped) = make_batches(train, tc.max_batch_length, tc.batch_size)?;
    if !dropped.is_empty() {
        warn(log, format!("{} utterances exceed max_batch_length and were dropped: {}", dropped.len(), dropped.join(", ")));
    }
    let mut skipped = 0;
    if tc.alpha > 0.0 {
        let before = batches.len();
        batches.retain(|b| check_alignable(b).is_ok());
        skipped = before - batches.len();
        if skipped > 0 {
            warn(log, format!("{skipped} batches skipped: a target is longer than its subsampled frames allow"));
        }
    }
    if batches.is_empty() {
        return Err(Error::InvalidInput("no trainable batches".into()));
    }
    let (dev_batches, dev_dropped) = make_batches(dev, tc.max_batch_length, tc.batch_size)?;
    if !dev_dropped.is_empty() {
        warn(log, format!("{} dev utterances dropped", dev_dropped.len()));
    }
    if dev_batches.is_empty() {
        return Err(Error::InvalidInput("empty dev set".into()));
    }
    let dev_words = words_of(&dev_batches, dev);

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));
    let mut metas = Vec::new();
    let mut reports = Vec::new();
    let ckpt_list = out_dir.join(CHECKPOINTS_FILE);
    let mut list_text = String::new();
    'epochs: for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        for group in order.chunks(tc.grad_accum) {
            let group: Vec<Batch> = group.iter().map(|&i| batches[i].clone()).collect();
            let r = trainer.step(&group)?;
            writeln!(
                metrics,
                "{},{},{},{},{},{},{}",
                r.step, epoch, r.loss.ctc, r.loss.s2s, r.loss.combined, r.lr, r.grad_norm
            )
            .map_err(io_err(&metrics_path))?;
            reports.push((epoch, r));
            if tc.max_steps > 0 && r.step >= tc.max_steps {
                save_epoch(&model, &trainer, epoch, &dev_batches, &dev_words, cfg, tokenizer, out_dir, &mut metas, &mut list_text, log)?;
                break 'epochs;
            }
        }
        save_epoch(&model, &trainer, epoch, &dev_batches, &dev_words, cfg, tokenizer, out_dir, &mut metas, &mut list_text, log)?;
    }
    std::fs::write(&ckpt_list, &list_text).map_err(io_err(&ckpt_list))?;

    let (avg, picked, short) = average_checkpoints(&metas, tc.avg_top_k)?;
    if let Some(w) = short {
        warn(log, w);
    }
    let _ = writeln!(
        log,
        "averaged epochs {:?}",
        picked.iter().map(|m| m.epoch).collect::<Vec<_>>()
    );
    let averaged = out_dir.join(AVERAGED_FILE);
    std::fs::write(&averaged, avg.encode()).map_err(io_err(&averaged))?;
    avg.load_into(&model)?;
    let steps = trainer.steps_taken();
    drop(trainer);
    Ok(TrainOutcome {
        model,
        metas,
        averaged,
        steps,
        skipped_batches: skipped,
        dropped_utterances: dropped,
        warnings,
        reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_epoch(
    model: &SpeechMambaModel,
    trainer: &Trainer<'_>,
    epoch: usize,
    dev: &[Batch],
    dev_words: &[Vec<String>],
    cfg: &RunConfig,
    tokenizer: &Tokenizer,
    out_dir: &Path,
    metas: &mut Vec<CheckpointMeta>,
    list_text: &mut String,
    log: &mut dyn Write,
) -> Result<()> {
    if metas.last().is_some_and(|m: &CheckpointMeta| m.epoch == epoch) {
        return Ok(());
    }
    let metric = dev_metric(model, dev, dev_words, &trainer.cfg.objective, cfg.train.selection_metric, tokenizer)?;
    if !metric.is_finite() {
        return Err(Error::Core(speech_mamba_core::Error::NonFinite(format!("dev metric after epoch {epoch}"))));
    }
    let path = out_dir.join(format!("epoch{epoch:03}.ckpt"));
    std::fs::write(&path, Checkpoint::from_module(model)?.encode()).map_err(io_err(&path))?;
    let meta = CheckpointMeta {
        step: trainer.steps_taken(),
        epoch,
        dev_metric: metric,
        path: path.display().to_string(),
    };
    list_text.push_str(&serde_json::to_string(&meta).expect("meta serializes"));
    list_text.push('\n');
    let _ = writeln!(log, "epoch {epoch} step {} dev {metric:.6}", meta.step);
    metas.push(meta);
    Ok(())
}

/// Rebuilds a trained model from a training output directory.
pub fn load_trained(dir: &Path, checkpoint: Option<&Path>) -> Result<(SpeechMambaModel, Tokenizer, RunConfig)> {
    let tokenizer = Tokenizer::load(&dir.join(TOKENS_FILE))?;
    let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    cfg.resolve(tokenizer.vocab_size())?;
    let model = SpeechMambaModel::new(cfg.model.clone(), cfg.train.seed)?;
    let default = dir.join(AVERAGED_FILE);
    let path = checkpoint.unwrap_or(&default);
    Checkpoint::decode(&std::fs::read(path).map_err(io_err(path))?)?.load_into(&model)?;
    Ok((model, tokenizer, cfg))
}
