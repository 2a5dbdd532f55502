//! Run configuration: one JSON document covering data, model, training and
//! inference. Command-line flags are applied on top of it.

use std::fs;
use std::path::Path;

use comic_core::attention::{AttentionConfig, Projection};
use comic_core::corpus::SynthConfig;
use comic_core::decoder::DecoderConfig;
use comic_core::inference::InferenceConfig;
use comic_core::radix::{RadixConfig, TokenCodec};
use comic_core::trainer::TrainConfig;
use comic_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CodecConfig {
    /// `digits` defaults to the fewest that cover the vocabulary.
    Radix {
        base: usize,
        #[serde(default)]
        digits: Option<usize>,
    },
    Word,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig::Radix { base: 256, digits: None }
    }
}

impl CodecConfig {
    /// Codec for a word vocabulary of `vocab_size` entries (UNK included).
    pub fn codec(&self, vocab_size: usize) -> Result<TokenCodec> {
        match *self {
            CodecConfig::Radix { base, digits } => {
                let cfg = match digits {
                    Some(d) => RadixConfig::new(base, d)?,
                    None => RadixConfig::covering(base, vocab_size)?,
                };
                cfg.check_vocab(vocab_size)?;
                Ok(TokenCodec::Radix(cfg))
            }
            CodecConfig::Word => Ok(TokenCodec::Word { vocab_size }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub word_size: usize,
    pub state_size: usize,
    pub mlp_size: usize,
    pub heads: usize,
    pub projection: Projection,
    pub temperature: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            word_size: 256,
            state_size: 512,
            mlp_size: 512,
            heads: 1,
            projection: Projection::None,
            temperature: 1.0,
            tie_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Captions are cut to this many words.
    pub max_words: usize,
    pub min_freq: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            max_words: 20,
            min_freq: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub beam_size: usize,
    /// Overrides the codec-derived default when set.
    pub max_tokens: Option<usize>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            beam_size: 3,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub channels: usize,
    pub noise_sd: f32,
    /// Records moved to a separate test split.
    pub holdout: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            count: d.count,
            channels: d.channels,
            noise_sd: d.noise_sd,
            holdout: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub inference: InferenceSection,
    pub data: DataSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let mut train = self.train;
        train.seed = self.seed;
        train.validate()?;
        if let CodecConfig::Radix { base, digits } = self.codec {
            RadixConfig::new(base, digits.unwrap_or(1))?;
        }
        if self.data.max_words == 0 {
            return Err(Error::Config("data.max_words must be >= 1".into()));
        }
        if self.inference.beam_size == 0 {
            return Err(Error::Config("inference.beam_size must be >= 1".into()));
        }
        // Channel count is unknown here; a multiple of every head count
        // stands in so the size checks still run.
        self.attention(self.model.heads.max(1) * 64).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            count: self.synth.count,
            channels: self.synth.channels,
            noise_sd: self.synth.noise_sd,
        }
    }

    fn attention(&self, feature_channels: usize) -> AttentionConfig {
        AttentionConfig {
            heads: self.model.heads,
            mlp_size: self.model.mlp_size,
            projection: self.model.projection,
            temperature: self.model.temperature,
            feature_channels,
            state_size: self.model.state_size,
        }
    }

    /// Decoder layout for features with `feature_channels` channels and a
    /// word vocabulary of `vocab_size` entries. The image embedding is the
    /// mean feature vector, so its size equals the channel count.
    pub fn decoder(&self, feature_channels: usize, vocab_size: usize) -> Result<(DecoderConfig, TokenCodec)> {
        let codec = self.codec.codec(vocab_size)?;
        let cfg = DecoderConfig {
            state_size: self.model.state_size,
            word_size: self.model.word_size,
            image_embed_size: feature_channels,
            encoded_vocab_size: codec.encoded_vocab_size(),
            attention: self.attention(feature_channels),
            dropout_rate: self.train.dropout,
            tie_embeddings: self.model.tie_embeddings,
        };
        cfg.validate()?;
        Ok((cfg, codec))
    }

    pub fn inference(&self, codec: &TokenCodec) -> InferenceConfig {
        InferenceConfig {
            beam_size: self.inference.beam_size,
            max_tokens: self
                .inference
                .max_tokens
                .unwrap_or_else(|| codec.max_tokens(self.data.max_words)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "model": {"heads": 8}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.state_size, 512);
        assert_eq!(cfg.train, TrainConfig::default());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"hedas": 8}}"#).is_err());
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.model.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig {
            codec: CodecConfig::Radix { base: 16, digits: Some(2) },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.decoder(64, 300), Err(Error::Capacity(_))));
        let (d, codec) = cfg.decoder(64, 200).unwrap();
        assert_eq!(d.encoded_vocab_size, 18);
        assert_eq!(codec.encoded_vocab_size(), 18);
    }

    #[test]
    fn radix_digits_cover_vocabulary() {
        let c = CodecConfig::Radix { base: 32, digits: None }.codec(302).unwrap();
        assert_eq!(c.tokens_per_word(), 2);
        assert_eq!(c.encoded_vocab_size(), 34);
    }
}
