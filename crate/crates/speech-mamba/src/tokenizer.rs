//! Transcript normalisation and token tables.
//!
//! Ids 0, 1 and 2 are reserved for blank, BOS and EOS; symbols start at 3.
//! Character tables map every character, including space, to one token.
//! Subword tables read `token id` lines and tokenize words greedily by
//! longest match, with `▁` marking a word start.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use speech_mamba_core::{BLANK_ID, BOS_ID, EOS_ID, FIRST_LABEL_ID};

use crate::error::{io_err, Error, Result};

/// Word-start marker in subword tables.
pub const WORD_START: char = '\u{2581}';

/// Uppercases and removes punctuation other than apostrophes; runs of
/// whitespace collapse to one space and the ends are trimmed.
pub fn normalize(text: &str) -> String {
    let kept: String = text
        .chars()
        .flat_map(char::to_uppercase)
        .filter(|c| c.is_alphanumeric() || *c == '\'' || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Kind {
    Chars,
    Subwords,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    kind: Kind,
    symbols: Vec<String>,
    ids: HashMap<String, usize>,
    longest: usize,
}

impl Tokenizer {
    /// Character table over every symbol in the normalised transcripts,
    /// in sorted order.
    pub fn from_transcripts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Tokenizer {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(|t| normalize(t).chars().collect::<Vec<_>>()).collect();
        Self::from_chars(chars)
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Tokenizer {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Self::build(Kind::Chars, set.into_iter().map(String::from).collect())
    }

    fn build(kind: Kind, labels: Vec<String>) -> Tokenizer {
        let mut symbols = vec!["<blank>".to_string(), "<s>".to_string(), "</s>".to_string()];
        symbols.extend(labels);
        let ids = symbols.iter().enumerate().skip(FIRST_LABEL_ID).map(|(i, s)| (s.clone(), i)).collect();
        let longest = symbols.iter().skip(FIRST_LABEL_ID).map(|s| s.chars().count()).max().unwrap_or(1);
        Tokenizer {
            kind,
            symbols,
            ids,
            longest,
        }
    }

    /// Parses `token id` lines. Ids 3.. must be dense and each appear once;
    /// lines for ids below 3 are ignored.
    pub fn parse_table(text: &str, origin: &str) -> Result<Tokenizer> {
        let bad = |line: usize, m: String| Error::Config {
            origin: format!("{origin}:{line}"),
            message: m,
        };
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(tok), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(i + 1, format!("expected `token id`, got {line:?}")));
            };
            let id: usize = id.parse().map_err(|_| bad(i + 1, format!("bad id {id:?}")))?;
            if id >= FIRST_LABEL_ID {
                entries.push((id, tok.to_string()));
            }
        }
        entries.sort();
        for (k, (id, tok)) in entries.iter().enumerate() {
            if *id != FIRST_LABEL_ID + k {
                return Err(bad(0, format!("ids must run densely from {FIRST_LABEL_ID}; {tok:?} has {id}")));
            }
        }
        let labels: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(bad(0, "a token appears twice".into()));
        }
        Ok(Self::build(Kind::Subwords, labels))
    }

    pub fn load_table(path: &Path) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_table(&text, &path.display().to_string())
    }

    /// Character tables as `token id` lines; space is written as `▁`.
    pub fn to_table(&self) -> String {
        self.symbols
            .iter()
            .enumerate()
            .skip(FIRST_LABEL_ID)
            .map(|(i, s)| {
                let s = if s == " " { WORD_START.to_string() } else { s.clone() };
                format!("{s} {i}\n")
            })
            .collect()
    }

    /// Reads a table written by [`Tokenizer::to_table`] for either kind:
    /// a lone `▁` token in a table of single characters means space.
    pub fn load(path: &Path) -> Result<Tokenizer> {
        let t = Self::load_table(path)?;
        if t.symbols.iter().skip(FIRST_LABEL_ID).all(|s| s.chars().count() == 1) {
            let chars = t.symbols.iter().skip(FIRST_LABEL_ID).map(|s| {
                let c = s.chars().next().expect("one char");
                if c == WORD_START {
                    ' '
                } else {
                    c
                }
            });
            return Ok(Self::from_chars(chars.collect::<Vec<_>>()));
        }
        Ok(t)
    }

    /// Total id space including the reserved ids.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let norm = normalize(text);
        match self.kind {
            Kind::Chars => norm
                .chars()
                .map(|c| {
                    self.ids.get(&c.to_string()).copied().ok_or_else(|| Error::OutOfVocabulary {
                        symbol: c.to_string(),
                        text: norm.clone(),
                    })
                })
                .collect(),
            Kind::Subwords => {
                let mut out = Vec::new();
                for word in norm.split(' ').filter(|w| !w.is_empty()) {
                    let chars: Vec<char> = std::iter::once(WORD_START).chain(word.chars()).collect();
                    let mut i = 0;
                    while i < chars.len() {
                        let found = (i + 1..=chars.len().min(i + self.longest)).rev().find_map(|j| {
                            let piece: String = chars[i..j].iter().collect();
                            self.ids.get(&piece).map(|&id| (id, j))
                        });
                        let Some((id, j)) = found else {
                            return Err(Error::OutOfVocabulary {
                                symbol: chars[i].to_string(),
                                text: norm.clone(),
                            });
                        };
                        out.push(id);
                        i = j;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Inverse of [`Tokenizer::tokenize`]; reserved ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let pieces = ids
            .iter()
            .filter(|&&i| i != BLANK_ID && i != BOS_ID && i != EOS_ID)
            .filter_map(|&i| self.symbols.get(i))
            .map(String::as_str);
        match self.kind {
            Kind::Chars => pieces.collect(),
            Kind::Subwords => {
                let joined: String = pieces.collect();
                joined
                    .split(WORD_START)
                    .filter(|w| !w.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }
}
