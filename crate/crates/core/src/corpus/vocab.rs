use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Frequency-ranked token table. Index = position; UNK is always last.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
    unk_id: usize,
}

impl Vocabulary {
    /// Builds from already-ranked `(token, frequency)` pairs and appends UNK
    /// with the given count of out-of-vocabulary occurrences.
    pub fn from_ranked(words: Vec<(String, u64)>, unk_count: u64) -> Result<Self> {
        let mut entries = words;
        entries.push((UNK_TOKEN.to_string(), unk_count));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (tok, _)) in entries.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        let unk_id = entries.len() - 1;
        Ok(Vocabulary {
            entries,
            index,
            unk_id,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|(t, _)| t.as_str())
    }

    pub fn frequency(&self, id: usize) -> Option<u64> {
        self.entries.get(id).map(|&(_, f)| f)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    /// Joins the tokens of `ids` with single spaces; unknown ids render as UNK.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Keeps tokens with frequency `>= min_freq`, sorted by descending frequency
/// then lexicographically, and appends UNK.
pub fn build_vocab<S: AsRef<str>>(captions: &[Vec<S>], min_freq: u64) -> Result<Vocabulary> {
    if min_freq < 1 {
        return Err(Error::Argument("min_freq must be >= 1".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for cap in captions {
        for tok in cap {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, u64)> = Vec::new();
    let mut dropped = 0;
    for (tok, n) in counts {
        if n >= min_freq && tok != UNK_TOKEN {
            kept.push((tok.to_string(), n));
        } else {
            dropped += n;
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_ranked(kept, dropped)
}

/// Writes `token<TAB>frequency` lines; line number is the index.
pub fn write_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut s = String::new();
    for (tok, f) in &vocab.entries {
        s.push_str(tok);
        s.push('\t');
        s.push_str(&f.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut words = Vec::new();
    let mut unk = None;
    let mut offset = 0;
    for (lineno, line) in text.lines().enumerate() {
        let (tok, freq) = line.split_once('\t').ok_or_else(|| Error::Format {
            offset,
            msg: format!("line {} is not token<TAB>frequency", lineno + 1),
        })?;
        let freq: u64 = freq.trim().parse().map_err(|_| Error::Format {
            offset: offset + tok.len() + 1,
            msg: format!("bad frequency on line {}", lineno + 1),
        })?;
        offset += line.len() + 1;
        if tok == UNK_TOKEN {
            unk = Some(freq);
        } else if unk.is_some() {
            return Err(Error::Format {
                offset,
                msg: "tokens after <unk>; UNK must be the last entry".into(),
            });
        } else {
            words.push((tok.to_string(), freq));
        }
    }
    let unk = unk.ok_or_else(|| Error::Format {
        offset,
        msg: "vocabulary has no <unk> entry".into(),
    })?;
    Vocabulary::from_ranked(words, unk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(spec: &[(&str, usize)]) -> Vec<Vec<String>> {
        spec.iter()
            .flat_map(|&(t, n)| std::iter::repeat_n(vec![t.to_string()], n))
            .collect()
    }

    #[test]
    fn threshold_boundary() {
        let v = build_vocab(&corpus(&[("a", 6), ("b", 5), ("c", 4)]), 5).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["a", "b", UNK_TOKEN]);
        assert_eq!(v.frequency(v.unk_id()), Some(4));
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = build_vocab(&corpus(&[("y", 5), ("x", 5)]), 5).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["x", "y", UNK_TOKEN]);
    }

    #[test]
    fn empty_corpus_gives_unk_only() {
        let v = build_vocab::<String>(&[], 5).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.unk_id(), 0);
        assert!(build_vocab::<String>(&[], 0).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let v = build_vocab(&corpus(&[("a", 6), ("b", 5)]), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        write_vocab(&v, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a\t6\nb\t5\n<unk>\t0\n");
        assert_eq!(read_vocab(&p).unwrap(), v);
    }
}
