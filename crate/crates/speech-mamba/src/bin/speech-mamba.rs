use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use speech_mamba::bench::{scaling, BenchGeometry};
use speech_mamba::config::{RunConfig, SEED_ENV};
use speech_mamba::fbank::Fbank;
use speech_mamba::longcontext::{plan_long_context, write_long_context_audio, LongContextSpec, PackOutcome};
use speech_mamba::manifest::{read_manifest, write_manifest};
use speech_mamba::tokenizer::Tokenizer;
use speech_mamba::train::{load_corpus, load_trained, run_training};
use speech_mamba::transcripts::{decode_corpus, format_tsv, read_tsv, score};
use speech_mamba::{librispeech, synth, Error};
use speech_mamba_core::decode::DecodeConfig;
use speech_mamba_core::ssm::ScanMode;

#[derive(Parser)]
#[command(name = "speech-mamba", version, about = "Selective state-space speech recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics and the averaged model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Token table; built from the training transcripts when absent.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        feature_cache: Option<PathBuf>,
        /// `key=value` config overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transcribe a manifest with a trained model.
    Decode {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Hypothesis file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// 0 selects greedy CTC decoding.
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 0.3)]
        ctc_weight: f64,
        #[arg(long)]
        length_normalize: bool,
    },
    /// Word error rate of a hypothesis file against a reference file.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Merge utterances per speaker into long-context utterances.
    BuildLongcontext {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        min_s: f64,
        #[arg(long)]
        max_s: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write merged WAVs here; without it only the plan is written.
        #[arg(long)]
        audio_out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and block.
    Gradcheck,
    /// Encoder wall time at two sequence lengths, Mamba against Transformer.
    BenchScan {
        #[arg(long, default_value_t = 4096)]
        short: usize,
        #[arg(long, default_value_t = 8192)]
        long: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        ssm_state: Option<usize>,
        #[arg(long)]
        expand: Option<usize>,
        #[arg(long)]
        ffn_dim: Option<usize>,
        /// Use the tree-structured scan instead of the recurrence.
        #[arg(long)]
        tree_scan: bool,
    },
    /// Write a synthetic tone corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Manifest from a LibriSpeech-layout directory.
    PrepareLibrispeech {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_train(
    config: Option<&Path>,
    train: &Path,
    dev: &Path,
    out: &Path,
    tokens: Option<&Path>,
    feature_cache: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let tokenizer = match tokens {
        Some(p) => Tokenizer::load(p)?,
        None => {
            let recs = read_manifest(train)?;
            Tokenizer::from_transcripts(recs.iter().map(|r| r.text.as_str()))
        }
    };
    cfg.resolve(tokenizer.vocab_size())?;
    let fbank = Fbank::new(cfg.fbank.clone())?;
    let norm = cfg.train.normalize_features;
    let train_utts = load_corpus(train, &tokenizer, &fbank, norm, feature_cache)?;
    let dev_utts = load_corpus(dev, &tokenizer, &fbank, norm, feature_cache)?;
    eprintln!(
        "training on {} utterances, {} dev, {} parameters",
        train_utts.len(),
        dev_utts.len(),
        speech_mamba_core::model::SpeechMambaModel::new(cfg.model.clone(), 0)?.param_count()
    );
    let outcome = run_training(&cfg, &tokenizer, &train_utts, &dev_utts, out, &mut std::io::stderr())?;
    eprintln!(
        "{} steps, {} batches skipped, averaged model at {}",
        outcome.steps,
        outcome.skipped_batches,
        outcome.averaged.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            train,
            dev,
            out,
            tokens,
            feature_cache,
            overrides,
            seed,
        } => run_train(
            config.as_deref(),
            &train,
            &dev,
            &out,
            tokens.as_deref(),
            feature_cache.as_deref(),
            &overrides,
            seed,
        )?,
        Command::Decode {
            model_dir,
            checkpoint,
            manifest,
            out,
            beam,
            ctc_weight,
            length_normalize,
        } => {
            let (model, tokenizer, cfg) = load_trained(&model_dir, checkpoint.as_deref())?;
            let fbank = Fbank::new(cfg.fbank.clone())?;
            let utts = load_corpus(&manifest, &tokenizer, &fbank, cfg.train.normalize_features, None)?;
            let dcfg = DecodeConfig {
                beam_width: beam,
                ctc_weight: if model.cfg.use_s2s { ctc_weight } else { 1.0 },
                length_normalize,
                ..DecodeConfig::default()
            };
            if beam > 0 {
                dcfg.validate()?;
            }
            let text = format_tsv(&decode_corpus(&model, &tokenizer, &utts, &dcfg)?);
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Score { reference, hyp } => {
            let (wer, c, missing) = score(&read_tsv(&reference)?, &read_tsv(&hyp)?)?;
            if missing > 0 {
                eprintln!("warning: {missing} references have no hypothesis");
            }
            println!(
                "WER {:.2} ({} errors / {} words: S={} I={} D={})",
                100.0 * wer,
                c.errors(),
                c.ref_words,
                c.substitutions,
                c.insertions,
                c.deletions
            );
        }
        Command::BuildLongcontext {
            manifest,
            min_s,
            max_s,
            out,
            audio_out,
            trace,
        } => {
            let spec = LongContextSpec::new(min_s, max_s)?;
            let records = read_manifest(&manifest)?;
            let mut plan = plan_long_context(&records, spec);
            if let Some(dir) = &audio_out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                write_long_context_audio(&mut plan, &manifest, dir, 16_000)?;
            }
            write_manifest(&out, &plan.merged)?;
            if let Some(t) = trace {
                let text: String = plan.trace_lines().iter().map(|l| format!("{l}\n")).collect();
                std::fs::write(&t, text).with_context(|| format!("writing {}", t.display()))?;
            }
            let n = plan.merged.len();
            let total = plan.total_duration_s();
            println!(
                "{n} utterances, {total:.2} s total, {:.2} s average ({} too long, {} leftover packs)",
                if n > 0 { total / n as f64 } else { 0.0 },
                plan.count(PackOutcome::TooLong),
                plan.count(PackOutcome::Leftover)
            );
        }
        Command::Gradcheck => {
            let cases = speech_mamba_core::suite::gradient_suite()?;
            let mut failed = 0;
            for c in &cases {
                println!(
                    "{} {:<40} max rel err {:.3e} (tolerance {:.0e})",
                    if c.passed() { "ok  " } else { "FAIL" },
                    c.name,
                    c.report.max_rel_err,
                    c.tolerance()
                );
                if !c.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!(GradcheckFailed(failed));
            }
            println!("all {} gradient checks passed", cases.len());
        }
        Command::BenchScan {
            short,
            long,
            runs,
            d_model,
            heads,
            blocks,
            ssm_state,
            expand,
            ffn_dim,
            tree_scan,
        } => {
            let d = BenchGeometry::default();
            let g = BenchGeometry {
                d_model: d_model.unwrap_or(d.d_model),
                num_heads: heads.unwrap_or(d.num_heads),
                blocks: blocks.unwrap_or(d.blocks),
                ssm_state: ssm_state.unwrap_or(d.ssm_state),
                expand: expand.unwrap_or(d.expand),
                ffn_dim: ffn_dim.unwrap_or(d.ffn_dim),
                scan_mode: if tree_scan { ScanMode::Parallel } else { ScanMode::Sequential },
            };
            let r = scaling(&g, short, long, runs)?;
            println!("{g:?}");
            println!(
                "mamba       {short}: {:.4} s  {long}: {:.4} s  ratio {:.3}",
                r.mamba_s.0,
                r.mamba_s.1,
                r.mamba_ratio()
            );
            println!(
                "transformer {short}: {:.4} s  {long}: {:.4} s  ratio {:.3}",
                r.transformer_s.0,
                r.transformer_s.1,
                r.transformer_ratio()
            );
        }
        Command::Synth { out, count, seed } => {
            let m = synth::write_tone_corpus(&out, count, seed)?;
            println!("{}", m.display());
        }
        Command::PrepareLibrispeech { root, out } => {
            let recs = librispeech::scan(&root)?;
            write_manifest(&out, &recs)?;
            println!("{} utterances", recs.len());
        }
    }
    Ok(())
}

#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient checks exceeded their tolerance", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

/// Category label and exit code of an error.
fn categorize(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return ("gradcheck", 6);
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => ("config", 3),
        Some(Error::Io { .. }) => ("io", 4),
        Some(Error::Manifest { .. } | Error::DuplicateId { .. } | Error::Audio { .. } | Error::OutOfVocabulary { .. }) => {
            ("data", 5)
        }
        Some(Error::Core(speech_mamba_core::Error::Config(_))) => ("config", 3),
        Some(_) => ("runtime", 1),
        None if err.downcast_ref::<std::io::Error>().is_some() => ("io", 4),
        None => match err.downcast_ref::<speech_mamba_core::Error>() {
            Some(speech_mamba_core::Error::Config(_)) => ("config", 3),
            _ => ("runtime", 1),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = categorize(&e);
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
