//! Per-speaker sequential merging of utterances into long-context ones.

use std::path::Path;

use crate::audio::{read_audio, write_wav, Audio};
use crate::error::{Error, Result};
use crate::manifest::{resolve_audio, UtteranceRecord};
use crate::resample::resample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongContextSpec {
    pub min_s: f64,
    pub max_s: f64,
}

impl LongContextSpec {
    pub const PRESETS: [LongContextSpec; 5] = [
        LongContextSpec { min_s: 45.0, max_s: 60.0 },
        LongContextSpec { min_s: 55.0, max_s: 70.0 },
        LongContextSpec { min_s: 65.0, max_s: 80.0 },
        LongContextSpec { min_s: 75.0, max_s: 90.0 },
        LongContextSpec { min_s: 85.0, max_s: 100.0 },
    ];

    pub fn new(min_s: f64, max_s: f64) -> Result<LongContextSpec> {
        if !(min_s > 0.0 && min_s < max_s && max_s.is_finite()) {
            return Err(Error::InvalidInput(format!("long-context window needs 0 < min < max, got {min_s}..{max_s}")));
        }
        Ok(LongContextSpec { min_s, max_s })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PackOutcome {
    Emitted,
    /// Crossed the minimum at or beyond the maximum.
    TooLong,
    /// Speaker ran out before the minimum was crossed.
    Leftover,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pack {
    pub speaker: String,
    /// Indices into the sorted input.
    pub members: Vec<usize>,
    pub duration_s: f64,
    pub outcome: PackOutcome,
}

#[derive(Clone, Debug)]
pub struct LongContextPlan {
    /// Input records in `(speaker, order_key)` order.
    pub sorted: Vec<UtteranceRecord>,
    pub trace: Vec<Pack>,
    pub merged: Vec<UtteranceRecord>,
}

impl LongContextPlan {
    pub fn total_duration_s(&self) -> f64 {
        self.merged.iter().map(|r| r.duration_s).sum()
    }

    pub fn count(&self, outcome: PackOutcome) -> usize {
        self.trace.iter().filter(|p| p.outcome == outcome).count()
    }

    /// One line per pack: outcome, speaker, duration and member ids.
    pub fn trace_lines(&self) -> Vec<String> {
        self.trace
            .iter()
            .map(|p| {
                let ids: Vec<&str> = p.members.iter().map(|&i| self.sorted[i].id.as_str()).collect();
                format!("{:?}\t{}\t{:.2}\t{}", p.outcome, p.speaker, p.duration_s, ids.join(","))
            })
            .collect()
    }
}

fn merged_record(members: &[&UtteranceRecord], duration_s: f64) -> UtteranceRecord {
    let first = members[0];
    let last = members[members.len() - 1];
    let id = if members.len() == 1 {
        first.id.clone()
    } else {
        format!("{}+{}", first.id, last.id)
    };
    UtteranceRecord {
        audio_path: format!("{id}.wav"),
        id,
        duration_s,
        speaker: first.speaker.clone(),
        order_key: first.order_key.clone(),
        text: members.iter().map(|r| r.text.as_str()).collect::<Vec<_>>().join(" "),
    }
}

/// Greedy packing: consecutive utterances of one speaker accumulate until
/// their total first exceeds `min_s`; the pack is kept when the total is
/// below `max_s` and discarded otherwise, and a new pack starts. Whatever
/// remains when the speaker ends is dropped.
pub fn plan_long_context(records: &[UtteranceRecord], spec: LongContextSpec) -> LongContextPlan {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| (&a.speaker, &a.order_key).cmp(&(&b.speaker, &b.order_key)));
    let mut trace = Vec::new();
    let mut merged = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let speaker = sorted[i].speaker.clone();
        let mut members = Vec::new();
        let mut total = 0.0;
        while i < sorted.len() && sorted[i].speaker == speaker {
            members.push(i);
            total += sorted[i].duration_s;
            i += 1;
            if total > spec.min_s {
                let outcome = if total < spec.max_s {
                    let refs: Vec<&UtteranceRecord> = members.iter().map(|&k| &sorted[k]).collect();
                    merged.push(merged_record(&refs, total));
                    PackOutcome::Emitted
                } else {
                    PackOutcome::TooLong
                };
                trace.push(Pack {
                    speaker: speaker.clone(),
                    members: std::mem::take(&mut members),
                    duration_s: total,
                    outcome,
                });
                total = 0.0;
            }
        }
        if !members.is_empty() {
            trace.push(Pack {
                speaker,
                members,
                duration_s: total,
                outcome: PackOutcome::Leftover,
            });
        }
    }
    LongContextPlan { sorted, trace, merged }
}

/// Concatenates each emitted pack's audio at `sample_rate` into
/// `out_dir/<id>.wav`, updating durations to the written length.
pub fn write_long_context_audio(
    plan: &mut LongContextPlan,
    manifest: &Path,
    out_dir: &Path,
    sample_rate: u32,
) -> Result<()> {
    let emitted: Vec<Vec<usize>> = plan
        .trace
        .iter()
        .filter(|p| p.outcome == PackOutcome::Emitted)
        .map(|p| p.members.clone())
        .collect();
    for (rec, members) in plan.merged.iter_mut().zip(emitted) {
        let mut samples = Vec::new();
        for k in members {
            let src = &plan.sorted[k];
            let audio = read_audio(&resolve_audio(manifest, src))?;
            samples.extend(resample(&audio.samples, audio.sample_rate, sample_rate)?);
        }
        let out = Audio { samples, sample_rate };
        let path = out_dir.join(&rec.audio_path);
        write_wav(&path, &out)?;
        rec.duration_s = out.duration_s();
        rec.audio_path = path.display().to_string();
    }
    Ok(())
}
