//! Closed-form parameter counts for decoder configurations.
//!
//! The formulas here are written out independently of the decoder's shape
//! list; tests assert that both agree exactly.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Projection};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};

/// How the output vocabulary is specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutputVocab {
    /// Symbol count as seen by the decoder.
    Encoded { size: usize },
    /// Word vocabulary; GO and EOS are added unless already counted.
    Words { count: usize, specials_included: bool },
    /// Radix digits plus GO and EOS.
    Radix { base: usize },
}

impl OutputVocab {
    pub fn encoded_size(&self) -> usize {
        match *self {
            OutputVocab::Encoded { size } => size,
            OutputVocab::Words { count, specials_included } => count + if specials_included { 0 } else { 2 },
            OutputVocab::Radix { base } => base + 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: OutputVocab,
    pub word_size: usize,
    pub state_size: usize,
    pub mlp_size: usize,
    pub projection: Projection,
    pub heads: usize,
    pub feature_channels: usize,
    pub image_embed_size: usize,
    pub tie_embeddings: bool,
}

impl ModelSpec {
    /// Default sizes used throughout the reference configurations:
    /// m=256, n=k=512, r=832, z=1024, single head, no projection.
    pub fn standard(vocab: OutputVocab) -> Self {
        ModelSpec {
            vocab,
            word_size: 256,
            state_size: 512,
            mlp_size: 512,
            projection: Projection::None,
            heads: 1,
            feature_channels: 832,
            image_embed_size: 1024,
            tie_embeddings: false,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            mlp_size: self.mlp_size,
            projection: self.projection,
            temperature: 1.0,
            feature_channels: self.feature_channels,
            state_size: self.state_size,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            state_size: self.state_size,
            word_size: self.word_size,
            image_embed_size: self.image_embed_size,
            encoded_vocab_size: self.vocab.encoded_size(),
            attention: self.attention_config(),
            dropout_rate: 0.0,
            tie_embeddings: self.tie_embeddings,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.word_size == 0 || self.state_size == 0 || self.image_embed_size == 0 {
            return Err(Error::Config("model sizes must be >= 1".into()));
        }
        self.attention_config().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountReport {
    pub embeddings: usize,
    pub recurrent: usize,
    pub attention: usize,
    pub init: usize,
    pub norms: usize,
    pub total: usize,
    /// Published figure being compared against, if any.
    pub reference: Option<f64>,
    pub rel_err: Option<f64>,
}

impl CountReport {
    /// Attaches a reference value for `total`.
    pub fn against(mut self, reference: f64) -> Self {
        self.reference = Some(reference);
        self.rel_err = Some(rel_err(self.total, reference));
        self
    }
}

pub fn rel_err(computed: usize, reference: f64) -> f64 {
    (computed as f64 - reference) / reference
}

pub fn count(spec: &ModelSpec) -> Result<CountReport> {
    spec.validate()?;
    let v = spec.vocab.encoded_size();
    let (m, n, k, r, z) = (
        spec.word_size,
        spec.state_size,
        spec.mlp_size,
        spec.feature_channels,
        spec.image_embed_size,
    );
    let (context, extra) = match spec.projection {
        Projection::None => (r, 0),
        Projection::Untied { q } => (q, q * r),
        Projection::Tied => (k, 0),
    };
    let output = if !spec.tie_embeddings {
        v * n
    } else if m != n {
        n * m
    } else {
        0
    };
    let embeddings = m * v + output + v;
    let recurrent = 4 * n * (m + context + n) + 4 * n;
    let attention = k * r + k * n + k + 2 * k + extra;
    let init = n * z;
    let norms = 2 * z;
    Ok(CountReport {
        embeddings,
        recurrent,
        attention,
        init,
        norms,
        total: embeddings + recurrent + attention + init + norms,
        reference: None,
        rel_err: None,
    })
}

/// Which number of a report a suite row checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Total,
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub quantity: Quantity,
    pub reference: f64,
    pub computed: usize,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passes(&self) -> bool {
        self.rel_err.abs() <= self.tolerance
    }
}

/// Character vocabulary assumed for the character-level row.
pub const CHAR_VOCAB: usize = 58;

/// Published model sizes and the counts for the matching configurations.
pub fn reference_suite() -> Vec<SuiteRow> {
    let word = |count| OutputVocab::Words {
        count,
        specials_included: false,
    };
    let mut rows = Vec::new();
    let mut push = |name: String, spec: ModelSpec, quantity: Quantity, reference: f64, tolerance: f64| {
        let c = count(&spec).expect("reference configurations are valid");
        let computed = match quantity {
            Quantity::Total => c.total,
            Quantity::Embeddings => c.embeddings,
        };
        rows.push(SuiteRow {
            name,
            quantity,
            reference,
            computed,
            rel_err: rel_err(computed, reference),
            tolerance,
        });
    };

    let coco = ModelSpec::standard(word(9962));
    push("Word baseline".into(), coco, Quantity::Total, 12.2e6, 0.02);
    push("Word baseline".into(), coco, Quantity::Embeddings, 7.7e6, 0.02);
    push("Character".into(), ModelSpec::standard(word(CHAR_VOCAB)), Quantity::Total, 4.5e6, 0.03);
    push("Radix base-64".into(), ModelSpec::standard(OutputVocab::Radix { base: 64 }), Quantity::Total, 4.5e6, 0.02);
    push("Radix base-128".into(), ModelSpec::standard(OutputVocab::Radix { base: 128 }), Quantity::Total, 4.6e6, 0.02);

    let blocks = [
        ("Word m=64", word(9962), [9.8e6, 9.6e6, 9.2e6]),
        ("Radix base-128 m=64", OutputVocab::Radix { base: 128 }, [4.2e6, 3.9e6, 3.5e6]),
    ];
    for (label, vocab, sizes) in blocks {
        let modes = [
            ("none", Projection::None),
            ("untied", Projection::Untied { q: 512 }),
            ("tied", Projection::Tied),
        ];
        for ((mode_name, projection), size) in modes.into_iter().zip(sizes) {
            for heads in [1, 4, 8] {
                let spec = ModelSpec {
                    word_size: 64,
                    projection,
                    heads,
                    ..ModelSpec::standard(vocab)
                };
                push(format!("{label} {mode_name} g={heads}"), spec, Quantity::Total, size, 0.02);
            }
        }
    }

    let small_word = |count, n: usize, m| ModelSpec {
        word_size: m,
        state_size: n,
        mlp_size: n,
        ..ModelSpec::standard(word(count))
    };
    let comic = |base| ModelSpec {
        projection: Projection::Tied,
        heads: 8,
        ..ModelSpec::standard(OutputVocab::Radix { base })
    };
    push("MS-COCO Baseline-SC".into(), small_word(9962, 160, 128), Quantity::Total, 3.9e6, 0.02);
    push("MS-COCO COMIC-128".into(), comic(128), Quantity::Total, 3.9e6, 0.02);
    push("MS-COCO COMIC-256".into(), comic(256), Quantity::Total, 4.0e6, 0.02);
    push(
        "InstaPIC Baseline".into(),
        ModelSpec::standard(word(25598)),
        Quantity::Total,
        24.0e6,
        0.02,
    );
    push("InstaPIC Baseline-SI".into(), small_word(25598, 80, 64), Quantity::Total, 4.2e6, 0.02);
    push("InstaPIC COMIC-160".into(), comic(160), Quantity::Total, 4.0e6, 0.02);
    push("InstaPIC COMIC-256".into(), comic(256), Quantity::Total, 4.0e6, 0.02);
    rows
}

/// Aligned text rendering of [`reference_suite`].
pub fn format_suite(rows: &[SuiteRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:<10}  {:>9}  {:>12}  {:>8}  {}\n",
        "name", "quantity", "reference", "computed", "rel_err", "ok"
    );
    for r in rows {
        let q = match r.quantity {
            Quantity::Total => "total",
            Quantity::Embeddings => "embeddings",
        };
        out.push_str(&format!(
            "{:<width$}  {:<10}  {:>8.1}M  {:>12}  {:>+7.2}%  {}\n",
            r.name,
            q,
            r.reference / 1e6,
            r.computed,
            100.0 * r.rel_err,
            if r.passes() { "yes" } else { "NO" }
        ));
    }
    out
}
