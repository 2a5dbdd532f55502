use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use comic_core::attention::Projection;
use comic_core::{Error, Result};

use crate::config::{CodecConfig, RunConfig};

/// Compact image-caption decoder toolkit: radix vocabularies, multi-head
/// attention, training, beam search and evaluation.
#[derive(Debug, Parser)]
#[command(name = "comic-kit", version)]
pub struct Cli {
    /// Seed for every random choice (initialisation, shuffling, dropout,
    /// synthetic data).
    #[arg(long, global = true, env = "COMIC_KIT_SEED")]
    pub seed: Option<u64>,

    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Vocabulary operations.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Print the radix digits of word indices or of a caption.
    Encode(EncodeArgs),
    /// Turn radix tokens back into word indices or text.
    Decode(DecodeArgs),
    /// Generate the synthetic shapes-and-colours captioning task.
    Synth(SynthArgs),
    /// Train a decoder.
    Train(TrainArgs),
    /// Caption every record of a dataset.
    Caption(CaptionArgs),
    /// BLEU-1..4 and caption statistics for generated captions.
    Eval(EvalArgs),
    /// Uniqueness and average length of generated captions.
    Stats(StatsArgs),
    /// Parameter counts.
    Params(ParamsArgs),
    /// Write per-step, per-head attention maps for one record.
    AttnDump(AttnDumpArgs),
}

#[derive(Debug, Subcommand)]
pub enum VocabCommand {
    /// Build a frequency-ranked vocabulary from a dataset's captions.
    Build(VocabBuildArgs),
}

#[derive(Debug, Args)]
pub struct VocabBuildArgs {
    /// dataset.jsonl, or the directory holding it.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub min_freq: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub base: usize,
    #[arg(long, default_value_t = 2)]
    pub digits: usize,
    /// Word indices; one output line each.
    #[arg(long, num_args = 1.., conflicts_with = "caption")]
    pub index: Vec<usize>,
    /// Caption text, encoded with GO and EOS (needs --vocab).
    #[arg(long, requires = "vocab")]
    pub caption: Option<String>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub base: usize,
    #[arg(long, default_value_t = 2)]
    pub digits: usize,
    /// Render words through this vocabulary instead of printing indices.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Token stream; GO/EOS are `base` and `base + 1`.
    #[arg(required = true, num_args = 1..)]
    pub tokens: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f32>,
    /// Move the last N records into `<out>/test`; the rest go to `<out>/train`.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CodecKind {
    Radix,
    Word,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProjectionKind {
    None,
    Untied,
    Tied,
}

/// Model-shape overrides.
#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub codec: Option<CodecKind>,
    #[arg(long)]
    pub base: Option<usize>,
    #[arg(long)]
    pub digits: Option<usize>,
    #[arg(long)]
    pub word_size: Option<usize>,
    #[arg(long)]
    pub state_size: Option<usize>,
    #[arg(long)]
    pub mlp_size: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, value_enum)]
    pub projection: Option<ProjectionKind>,
    /// Context size of an untied projection.
    #[arg(long)]
    pub proj_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub tie_embeddings: Option<bool>,
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let (base, digits) = match cfg.codec {
            CodecConfig::Radix { base, digits } => (base, digits),
            CodecConfig::Word => (256, None),
        };
        let radix = CodecConfig::Radix {
            base: self.base.unwrap_or(base),
            digits: self.digits.or(digits),
        };
        match self.codec {
            Some(CodecKind::Word) => {
                if self.base.is_some() || self.digits.is_some() {
                    return Err(Error::Argument("--base/--digits only apply to the radix codec".into()));
                }
                cfg.codec = CodecConfig::Word;
            }
            Some(CodecKind::Radix) => cfg.codec = radix,
            None if self.base.is_some() || self.digits.is_some() => cfg.codec = radix,
            None => {}
        }
        let m = &mut cfg.model;
        set(&mut m.word_size, self.word_size);
        set(&mut m.state_size, self.state_size);
        set(&mut m.mlp_size, self.mlp_size);
        set(&mut m.heads, self.heads);
        set(&mut m.temperature, self.temperature);
        set(&mut m.tie_embeddings, self.tie_embeddings);
        let q = self.proj_size.or(match m.projection {
            Projection::Untied { q } => Some(q),
            _ => None,
        });
        match self.projection {
            Some(ProjectionKind::None) => m.projection = Projection::None,
            Some(ProjectionKind::Tied) => m.projection = Projection::Tied,
            Some(ProjectionKind::Untied) => {
                let q = q.ok_or_else(|| Error::Argument("--projection untied needs --proj-size".into()))?;
                m.projection = Projection::Untied { q };
            }
            None => {
                if let (Some(q), Projection::Untied { .. }) = (self.proj_size, m.projection) {
                    m.projection = Projection::Untied { q };
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Args, Default)]
pub struct TrainingArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub halve_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

impl TrainingArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.lr0, self.lr);
        set(&mut t.lr_min, self.lr_min);
        set(&mut t.halve_every_epochs, self.halve_every);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.dropout, self.dropout);
        set(&mut t.weight_decay, self.weight_decay);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset.jsonl, or its directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to vocab.tsv next to the dataset.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from an epoch checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_words: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// Model checkpoint (its .json sidecar must sit next to it).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Worker threads; output order does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// JSON-lines output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output of `caption`.
    #[arg(long)]
    pub captions: PathBuf,
    /// Dataset holding the reference captions.
    #[arg(long)]
    pub data: PathBuf,
    /// Training dataset, for the uniqueness statistic.
    #[arg(long)]
    pub training: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub training: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Published model sizes next to the counts for their configurations.
    #[arg(long)]
    pub suite: bool,
    /// Also write the result as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Word vocabulary size, specials excluded (single-model mode).
    #[arg(long, required_unless_present = "suite")]
    pub vocab_size: Option<usize>,
    #[arg(long, default_value_t = 832)]
    pub channels: usize,
    #[arg(long, default_value_t = 1024)]
    pub embed_size: usize,
    /// Published total to compare against.
    #[arg(long)]
    pub reference: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Record position in the dataset.
    #[arg(long, default_value_t = 0)]
    pub record: usize,
    /// Token sequence to replay (GO first); the model's own caption when omitted.
    #[arg(long, num_args = 1..)]
    pub tokens: Vec<usize>,
    /// CSV path; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}
