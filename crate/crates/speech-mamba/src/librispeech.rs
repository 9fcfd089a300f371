//! Manifests from a LibriSpeech-layout directory:
//! `<root>/<speaker>/<chapter>/<speaker>-<chapter>.trans.txt` plus one FLAC
//! per transcript line.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::manifest::UtteranceRecord;

fn flac_duration(path: &Path) -> Result<f64> {
    let reader = claxon::FlacReader::open(path).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let info = reader.streaminfo();
    let samples = info.samples.ok_or_else(|| Error::Audio {
        path: path.to_path_buf(),
        message: "stream length missing from header".into(),
    })?;
    Ok(samples as f64 / info.sample_rate as f64)
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Every utterance under `root`, ordered by speaker, chapter and index.
/// Audio paths are absolute; durations come from the FLAC headers.
pub fn scan(root: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    for spk_dir in sorted_dirs(root)? {
        let speaker = spk_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        for ch_dir in sorted_dirs(&spk_dir)? {
            let chapter = ch_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
            let trans = ch_dir.join(format!("{speaker}-{chapter}.trans.txt"));
            let text = std::fs::read_to_string(&trans).map_err(io_err(&trans))?;
            for (i, line) in text.lines().enumerate() {
                let Some((id, words)) = line.trim().split_once(' ') else {
                    if line.trim().is_empty() {
                        continue;
                    }
                    return Err(Error::Manifest {
                        path: trans.clone(),
                        line: i + 1,
                        message: "expected `<id> <transcript>`".into(),
                    });
                };
                let audio = ch_dir.join(format!("{id}.flac"));
                let order_key = id.strip_prefix(&format!("{speaker}-")).unwrap_or(id).to_string();
                records.push(UtteranceRecord {
                    id: id.to_string(),
                    duration_s: flac_duration(&audio)?,
                    audio_path: std::path::absolute(&audio).unwrap_or(audio).display().to_string(),
                    speaker: speaker.clone(),
                    order_key,
                    text: words.trim().to_string(),
                });
            }
        }
    }
    Ok(records)
}
