//! Hypothesis files (`<utt_id>\t<text>` lines), corpus decoding and scoring.

use std::collections::HashMap;
use std::path::Path;

use speech_mamba_core::decode::{recognize, word_error_rate, DecodeConfig, EditCounts};
use speech_mamba_core::model::SpeechMambaModel;
use speech_mamba_core::nn::{Ctx, Module};
use speech_mamba_core::Tensor;

use crate::error::{io_err, Error, Result};
use crate::tokenizer::{normalize, Tokenizer};
use crate::train::{batch_of, Utterance};

pub fn parse_tsv(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, words) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim().to_string();
        if let Some(first) = seen.insert(id.clone(), i + 1) {
            return Err(Error::DuplicateId {
                path: origin.to_path_buf(),
                id,
                first,
                second: i + 1,
            });
        }
        out.push((id, words.trim().to_string()));
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_tsv(&text, path)
}

pub fn format_tsv(rows: &[(String, String)]) -> String {
    rows.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect()
}

/// Corpus WER of `hyps` against `refs`, both normalised. Utterances without
/// a hypothesis count as empty; hypotheses for unknown ids are an error.
pub fn score(refs: &[(String, String)], hyps: &[(String, String)]) -> Result<(f64, EditCounts, usize)> {
    let hyp_map: HashMap<&str, &str> = hyps.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let ref_ids: std::collections::HashSet<&str> = refs.iter().map(|(i, _)| i.as_str()).collect();
    if let Some((id, _)) = hyps.iter().find(|(i, _)| !ref_ids.contains(i.as_str())) {
        return Err(Error::InvalidInput(format!("hypothesis for {id:?} has no reference")));
    }
    let words = |t: &str| normalize(t).split(' ').filter(|w| !w.is_empty()).map(String::from).collect::<Vec<_>>();
    let r: Vec<Vec<String>> = refs.iter().map(|(_, t)| words(t)).collect();
    let mut missing = 0;
    let h: Vec<Vec<String>> = refs
        .iter()
        .map(|(id, _)| match hyp_map.get(id.as_str()) {
            Some(t) => words(t),
            None => {
                missing += 1;
                Vec::new()
            }
        })
        .collect();
    let (wer, counts) = word_error_rate(&r, &h)?;
    Ok((wer, counts, missing))
}

/// Beam-search (or greedy CTC with `beam_width == 0`) transcripts for every utterance.
pub fn decode_corpus(
    model: &SpeechMambaModel,
    tokenizer: &Tokenizer,
    utts: &[Utterance],
    cfg: &DecodeConfig,
) -> Result<Vec<(String, String)>> {
    model.set_trainable(false);
    let ctx = Ctx::new(0);
    utts.iter()
        .map(|u| {
            let ids = if cfg.beam_width == 0 {
                let b = batch_of(&[u])?;
                speech_mamba_core::train::greedy_decode_batch(model, &b)?.remove(0)
            } else {
                let x = Tensor::new(u.features.data.clone(), &[1, u.features.frames, u.features.dim])?;
                recognize(model, &x, cfg, None, &ctx)?.labels().to_vec()
            };
            Ok((u.id.clone(), tokenizer.detokenize(&ids)))
        })
        .collect()
}
