//! Newline-delimited JSON utterance manifests.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: String,
    pub duration_s: f64,
    pub speaker: String,
    /// Orders utterances within one speaker, e.g. chapter and index.
    pub order_key: String,
    pub text: String,
}

/// Parses manifest text. Blank lines are skipped; `origin` names the source
/// in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !(rec.duration_s > 0.0 && rec.duration_s.is_finite()) {
            return Err(Error::Manifest {
                path: origin.to_path_buf(),
                line: line_no,
                message: format!("duration_s must be positive, got {}", rec.duration_s),
            });
        }
        if let Some(&first) = seen.get(&rec.id) {
            return Err(Error::DuplicateId {
                path: origin.to_path_buf(),
                id: rec.id,
                first,
                second: line_no,
            });
        }
        seen.insert(rec.id.clone(), line_no);
        records.push(rec);
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err(path))?);
        text.push('\n');
    }
    parse_manifest(&text, path)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io_err(path))
}

/// Resolves a record's audio path relative to the manifest's directory.
pub fn resolve_audio(manifest: &Path, record: &UtteranceRecord) -> std::path::PathBuf {
    let p = Path::new(&record.audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            audio_path: format!("{id}.wav"),
            duration_s: 1.5,
            speaker: "s1".into(),
            order_key: "0001".into(),
            text: "HELLO WORLD".into(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![rec("a"), rec("b")];
        write_manifest(&path, &records).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn duplicates_are_rejected() {
        let line = serde_json::to_string(&rec("x")).unwrap();
        let text = format!("{line}\n{line}\n");
        let err = parse_manifest(&text, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("\"x\""), "{err}");
        assert!(matches!(err, Error::DuplicateId { first: 1, second: 2, .. }));
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let good = serde_json::to_string(&rec("a")).unwrap();
        let text = format!("{good}\n{{\"id\": 3}}\n");
        match parse_manifest(&text, Path::new("m")) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let extra = good.replace("}", ",\"lang\":\"en\"}");
        assert!(parse_manifest(&extra, Path::new("m")).is_err());
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());
    }
}
