//! Radix vocabulary codec.
//!
//! A word index `i < base^digits` is written as `digits` big-endian base-`base`
//! digits. Two single-token specials follow the digit symbols: GO at index
//! `base` and EOS at `base + 1`, so the decoder only ever sees `base + 2`
//! symbols regardless of the word vocabulary size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadixConfig {
    base: usize,
    digits: usize,
}

impl RadixConfig {
    pub fn new(base: usize, digits: usize) -> Result<Self> {
        if base < 2 {
            return Err(Error::Config(format!("radix base must be >= 2, got {base}")));
        }
        if digits < 1 {
            return Err(Error::Config("radix digits must be >= 1".into()));
        }
        if base.checked_pow(digits as u32).is_none() {
            return Err(Error::Config(format!("{base}^{digits} overflows")));
        }
        Ok(RadixConfig { base, digits })
    }

    /// Smallest digit count that covers `vocab_size` words.
    pub fn covering(base: usize, vocab_size: usize) -> Result<Self> {
        let mut cfg = RadixConfig::new(base, 1)?;
        while cfg.capacity() < vocab_size {
            cfg = RadixConfig::new(base, cfg.digits + 1)?;
        }
        Ok(cfg)
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn digits(&self) -> usize {
        self.digits
    }

    pub fn go_index(&self) -> usize {
        self.base
    }

    pub fn eos_index(&self) -> usize {
        self.base + 1
    }

    /// Digit symbols plus GO and EOS.
    pub fn encoded_vocab_size(&self) -> usize {
        self.base + 2
    }

    /// `base^digits`, the number of encodable word indices.
    pub fn capacity(&self) -> usize {
        self.base.pow(self.digits as u32)
    }

    pub fn is_special(&self, token: usize) -> bool {
        token == self.go_index() || token == self.eos_index()
    }

    /// Checks that a word vocabulary fits.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if vocab_size > self.capacity() {
            return Err(Error::Capacity(format!(
                "vocabulary of {vocab_size} words exceeds {}^{} = {}",
                self.base,
                self.digits,
                self.capacity()
            )));
        }
        Ok(())
    }
}

/// Encoded token stream (digits and GO/EOS specials).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DigitSequence(pub Vec<usize>);

impl DigitSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Wraps a caption body in GO … EOS.
    pub fn framed(body: &[usize], cfg: &RadixConfig) -> Self {
        let mut v = Vec::with_capacity(body.len() + 2);
        v.push(cfg.go_index());
        v.extend_from_slice(body);
        v.push(cfg.eos_index());
        DigitSequence(v)
    }
}

impl std::ops::Deref for DigitSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Big-endian digits of `index`.
pub fn encode_index(index: usize, cfg: &RadixConfig) -> Result<Vec<usize>> {
    if index >= cfg.capacity() {
        return Err(Error::Range(format!(
            "word index {index} outside [0, {})",
            cfg.capacity()
        )));
    }
    let mut out = vec![0; cfg.digits];
    let mut rest = index;
    for slot in out.iter_mut().rev() {
        *slot = rest % cfg.base;
        rest /= cfg.base;
    }
    Ok(out)
}

pub fn decode_digits(digits: &[usize], cfg: &RadixConfig) -> Result<usize> {
    if digits.len() != cfg.digits {
        return Err(Error::Length {
            expected: cfg.digits,
            got: digits.len(),
        });
    }
    let mut acc = 0;
    for (position, &digit) in digits.iter().enumerate() {
        if digit >= cfg.base {
            return Err(Error::MalformedDigit {
                digit,
                position,
                base: cfg.base,
            });
        }
        acc = acc * cfg.base + digit;
    }
    Ok(acc)
}

/// Flattens the digits of every word. GO/EOS are not added here.
pub fn encode_caption(word_ids: &[usize], cfg: &RadixConfig) -> Result<DigitSequence> {
    let mut out = Vec::with_capacity(word_ids.len() * cfg.digits);
    for (pos, &w) in word_ids.iter().enumerate() {
        let d = encode_index(w, cfg).map_err(|e| Error::Range(format!("word {pos}: {e}")))?;
        out.extend(d);
    }
    Ok(DigitSequence(out))
}

/// Word ids recovered from model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedCaption {
    pub words: Vec<usize>,
    /// False when any group was malformed and replaced by UNK.
    pub valid: bool,
}

/// Post-processes arbitrary model output.
///
/// Stops at the first EOS and drops one leading GO. The rest is grouped into
/// `digits`-sized words; a group holding a special token, a trailing partial
/// group, or an id `>= vocab_size` becomes `unk_id` and clears `valid`.
pub fn decode_caption(tokens: &[usize], cfg: &RadixConfig, vocab_size: usize, unk_id: usize) -> DecodedCaption {
    let end = tokens
        .iter()
        .position(|&t| t == cfg.eos_index())
        .unwrap_or(tokens.len());
    let mut body = &tokens[..end];
    if body.first() == Some(&cfg.go_index()) {
        body = &body[1..];
    }
    let mut valid = true;
    let mut words = Vec::with_capacity(body.len() / cfg.digits + 1);
    for group in body.chunks(cfg.digits) {
        let word = if group.len() < cfg.digits {
            None
        } else {
            decode_digits(group, cfg).ok().filter(|&id| id < vocab_size)
        };
        match word {
            Some(id) => words.push(id),
            None => {
                valid = false;
                words.push(unk_id);
            }
        }
    }
    DecodedCaption { words, valid }
}

/// Digit-path dictionary from encoded words back to their strings.
#[derive(Debug, Clone)]
pub struct DecodeTrie {
    nodes: Vec<TrieNode>,
    digits: usize,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    edges: BTreeMap<usize, usize>,
    word: Option<String>,
}

impl DecodeTrie {
    /// Follows `path` from the root; returns the word at a full-depth leaf.
    pub fn lookup(&self, path: &[usize]) -> Option<&str> {
        if path.len() != self.digits {
            return None;
        }
        let mut node = 0;
        for d in path {
            node = *self.nodes[node].edges.get(d)?;
        }
        self.nodes[node].word.as_deref()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.word.is_some()).count()
    }

    /// Edges leaving the root, in digit order.
    pub fn root_edges(&self) -> Vec<usize> {
        self.nodes[0].edges.keys().copied().collect()
    }
}

pub fn build_decode_trie(vocab: &Vocabulary, cfg: &RadixConfig) -> Result<DecodeTrie> {
    cfg.check_vocab(vocab.len())?;
    let mut nodes = vec![TrieNode::default()];
    for (index, token) in vocab.tokens().enumerate() {
        let mut node = 0;
        for d in encode_index(index, cfg)? {
            let next = match nodes[node].edges.get(&d) {
                Some(&n) => n,
                None => {
                    nodes.push(TrieNode::default());
                    let n = nodes.len() - 1;
                    nodes[node].edges.insert(d, n);
                    n
                }
            };
            node = next;
        }
        nodes[node].word = Some(token.to_string());
    }
    Ok(DecodeTrie {
        nodes,
        digits: cfg.digits,
    })
}

/// How many times smaller the encoded vocabulary is, to one decimal.
pub fn reduction_factor(word_vocab_size: usize, cfg: &RadixConfig) -> f64 {
    let raw = word_vocab_size as f64 / cfg.encoded_vocab_size() as f64;
    (raw * 10.0).round() / 10.0
}

/// Output-side token layout of a decoder: radix digits or plain word ids.
///
/// Both layouts put GO and EOS right after the content symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenCodec {
    Radix(RadixConfig),
    Word { vocab_size: usize },
}

impl TokenCodec {
    fn content_symbols(&self) -> usize {
        match self {
            TokenCodec::Radix(cfg) => cfg.base,
            TokenCodec::Word { vocab_size } => *vocab_size,
        }
    }

    pub fn go(&self) -> usize {
        self.content_symbols()
    }

    pub fn eos(&self) -> usize {
        self.content_symbols() + 1
    }

    pub fn encoded_vocab_size(&self) -> usize {
        self.content_symbols() + 2
    }

    /// Tokens per word.
    pub fn tokens_per_word(&self) -> usize {
        match self {
            TokenCodec::Radix(cfg) => cfg.digits,
            TokenCodec::Word { .. } => 1,
        }
    }

    /// Maximum framed length for a caption of `max_words` words.
    pub fn max_tokens(&self, max_words: usize) -> usize {
        max_words * self.tokens_per_word() + 2
    }

    /// GO, the encoded words, EOS.
    pub fn encode(&self, word_ids: &[usize]) -> Result<Vec<usize>> {
        let body = match self {
            TokenCodec::Radix(cfg) => encode_caption(word_ids, cfg)?.0,
            TokenCodec::Word { vocab_size } => {
                if let Some(pos) = word_ids.iter().position(|&w| w >= *vocab_size) {
                    return Err(Error::Range(format!(
                        "word {pos}: id {} outside vocabulary of {vocab_size}",
                        word_ids[pos]
                    )));
                }
                word_ids.to_vec()
            }
        };
        let mut out = Vec::with_capacity(body.len() + 2);
        out.push(self.go());
        out.extend(body);
        out.push(self.eos());
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode) that tolerates arbitrary output.
    pub fn decode(&self, tokens: &[usize], vocab_size: usize, unk_id: usize) -> DecodedCaption {
        match self {
            TokenCodec::Radix(cfg) => decode_caption(tokens, cfg, vocab_size, unk_id),
            TokenCodec::Word { .. } => {
                let end = tokens.iter().position(|&t| t == self.eos()).unwrap_or(tokens.len());
                let mut body = &tokens[..end];
                if body.first() == Some(&self.go()) {
                    body = &body[1..];
                }
                let mut valid = true;
                let words = body
                    .iter()
                    .map(|&t| {
                        if t < vocab_size {
                            t
                        } else {
                            valid = false;
                            unk_id
                        }
                    })
                    .collect();
                DecodedCaption { words, valid }
            }
        }
    }
}
