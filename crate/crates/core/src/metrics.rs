//! Corpus BLEU and caption statistics.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// B-1 … B-4.
    pub bleu: Vec<f64>,
    pub unique_pct: f64,
    pub avg_len: f64,
    pub n: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-1 … BLEU-`max_n` with clipped counts, uniform weights,
/// closest-reference brevity penalty and no smoothing: an order with zero
/// matches zeroes that order and every higher one.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::Argument("BLEU needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Argument("max_n must be >= 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Argument("every hypothesis needs at least one reference".into()));
        }
        hyp_len += hyp.len();
        // Closest reference length; ties go to the shorter one.
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("non-empty");
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hyp_counts {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut dead = false;
    for n in 0..max_n {
        if matched[n] == 0 {
            dead = true;
        }
        if dead {
            out.push(0.0);
            continue;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

/// Lowercased, tokenised, single-space-joined form used for matching.
pub fn normalize_caption(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Percentage of captions absent from `training` and mean word count.
///
/// `training` must already hold normalised captions.
pub fn caption_stats<S: AsRef<str>>(generated: &[S], training: &HashSet<String>) -> Result<(f64, f64)> {
    if generated.is_empty() {
        return Err(Error::Argument("no generated captions".into()));
    }
    let mut unique = 0usize;
    let mut words = 0usize;
    for g in generated {
        let norm = normalize_caption(g.as_ref());
        if !training.contains(&norm) {
            unique += 1;
        }
        words += tokenize(g.as_ref()).len();
    }
    let n = generated.len() as f64;
    Ok((100.0 * unique as f64 / n, words as f64 / n))
}

/// BLEU-1..4 plus caption statistics for whitespace-tokenised captions.
pub fn evaluate<S: AsRef<str>>(generated: &[S], references: &[Vec<String>], training: &HashSet<String>) -> Result<MetricsReport> {
    let hyps: Vec<Vec<String>> = generated.iter().map(|g| tokenize(g.as_ref())).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
        .collect();
    let bleu = bleu(&hyps, &refs, 4)?;
    let (unique_pct, avg_len) = caption_stats(generated, training)?;
    Ok(MetricsReport {
        bleu,
        unique_pct,
        avg_len,
        n: generated.len(),
    })
}
