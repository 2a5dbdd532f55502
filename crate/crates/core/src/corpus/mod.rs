//! Vocabularies, caption preprocessing, datasets and feature maps.

mod dataset;
mod features;
mod synth;
mod vocab;

pub use dataset::{
    load_dataset, read_records, read_tokenized_captions, save_dataset, CaptionRecord, Dataset, DatasetMeta, FeatureRef,
    JsonRecord, DATASET_FILE, FEATURE_DIR, META_FILE, VOCAB_FILE,
};
pub use features::{decode_feature_map, encode_feature_map, read_feature_map, write_feature_map, FeatureMap, FMAP_MAGIC};
pub use synth::{
    decode_scene, synth_generate, Color, SceneObject, Shape, SynthConfig, SynthOutput, SyntheticScene, GRID_SIDE,
    MAX_CAPTION_WORDS,
};
pub use vocab::{build_vocab, read_vocab, write_vocab, Vocabulary, UNK_TOKEN};

/// Lowercases, strips punctuation (apostrophes between letters survive) and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        } else if c == '\'' {
            let inside = i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if inside {
                cleaned.push(c);
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Maps tokens to ids (OOV → UNK) and keeps at most `max_len` of them.
pub fn truncate_and_index<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id_or_unk(t.as_ref()))
        .collect()
}
