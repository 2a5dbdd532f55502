//! One function per subcommand.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use comic_core::accountant::{count, format_suite, reference_suite, ModelSpec, OutputVocab};
use comic_core::corpus::{
    build_vocab, load_dataset, read_records, read_tokenized_captions, read_vocab, save_dataset, synth_generate,
    tokenize, write_vocab, Dataset, Vocabulary, DATASET_FILE, VOCAB_FILE,
};
use comic_core::inference::{caption, dump_attention, write_attention_dump, AttentionDump, InferenceConfig};
use comic_core::metrics::{caption_stats, evaluate, normalize_caption};
use comic_core::radix::{decode_caption, encode_index, RadixConfig, TokenCodec};
use comic_core::trainer::{resume, train};
use comic_core::{Error, Model32, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::{CodecConfig, RunConfig};

/// Name of the resolved configuration written next to a trained model.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// One line of `caption` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
    /// False when the model's tokens did not decode cleanly.
    pub valid: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Vocab(VocabCommand::Build(a)) => vocab_build(&cfg, a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Synth(a) => synth(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Caption(a) => caption_cmd(cfg, a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Params(a) => params(cfg, a),
        Command::AttnDump(a) => attn_dump(cfg, a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

fn dataset_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

fn vocab_file(data: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => dataset_file(data).parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
    }
}

fn load(data: &Path, vocab: Option<&PathBuf>, max_words: usize) -> Result<(Dataset, Vocabulary)> {
    let vocab = read_vocab(&vocab_file(data, vocab))?;
    let mut dataset = load_dataset(&dataset_file(data), &vocab, max_words)?;
    if dataset.is_empty() {
        return Err(Error::Argument(format!("{} has no records", data.display())));
    }
    dataset.preload()?;
    Ok((dataset, vocab))
}

/// Writes to `path`, or stdout when there is none.
fn emit(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn vocab_build(cfg: &RunConfig, a: VocabBuildArgs) -> Result<()> {
    let captions = read_tokenized_captions(&dataset_file(&a.data))?;
    let vocab = build_vocab(&captions, a.min_freq.unwrap_or(cfg.data.min_freq))?;
    write_vocab(&vocab, &a.out)?;
    println!("{} entries ({} out-of-vocabulary occurrences) -> {}", vocab.len(), vocab.frequency(vocab.unk_id()).unwrap_or(0), a.out.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let rc = RadixConfig::new(a.base, a.digits)?;
    if let Some(text) = &a.caption {
        let vocab = read_vocab(a.vocab.as_ref().expect("clap requires --vocab"))?;
        rc.check_vocab(vocab.len())?;
        let ids: Vec<usize> = tokenize(text).iter().map(|t| vocab.id_or_unk(t)).collect();
        let tokens = TokenCodec::Radix(rc).encode(&ids)?;
        println!("{}", join(&tokens));
        return Ok(());
    }
    if a.index.is_empty() {
        return Err(Error::Argument("give --index or --caption".into()));
    }
    for &i in &a.index {
        println!("{}", join(&encode_index(i, &rc)?));
    }
    Ok(())
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn decode(a: DecodeArgs) -> Result<()> {
    let rc = RadixConfig::new(a.base, a.digits)?;
    let (text, valid) = match &a.vocab {
        Some(p) => {
            let vocab = read_vocab(p)?;
            let d = decode_caption(&a.tokens, &rc, vocab.len(), vocab.unk_id());
            (vocab.render(&d.words), d.valid)
        }
        None => {
            let d = decode_caption(&a.tokens, &rc, rc.capacity(), usize::MAX);
            let words: Vec<String> = d
                .words
                .iter()
                .map(|&w| if w == usize::MAX { "<unk>".to_string() } else { w.to_string() })
                .collect();
            (words.join(" "), d.valid)
        }
    };
    println!("{text}");
    if !valid {
        eprintln!("warning: malformed token stream; bad groups shown as <unk>");
    }
    Ok(())
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    s.count = a.count.unwrap_or(s.count);
    s.channels = a.channels.unwrap_or(s.channels);
    s.noise_sd = a.noise_sd.unwrap_or(s.noise_sd);
    s.holdout = a.holdout.unwrap_or(s.holdout);
    if s.holdout >= s.count {
        return Err(Error::Argument(format!(
            "holdout {} leaves no training records out of {}",
            s.holdout, s.count
        )));
    }
    let out = synth_generate(&cfg.synth_config())?;
    if cfg.synth.holdout == 0 {
        save_dataset(&out.dataset, &out.vocab, &a.out)?;
        println!("{} records -> {}", out.dataset.len(), a.out.display());
    } else {
        let (train_set, test_set) = out.dataset.split_tail(cfg.synth.holdout);
        save_dataset(&train_set, &out.vocab, &a.out.join("train"))?;
        save_dataset(&test_set, &out.vocab, &a.out.join("test"))?;
        println!(
            "{} training and {} test records -> {}",
            train_set.len(),
            test_set.len(),
            a.out.display()
        );
    }
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    a.model.apply(&mut cfg)?;
    a.training.apply(&mut cfg);
    if let Some(m) = a.max_words {
        cfg.data.max_words = m;
    }
    cfg.validate()?;
    let (dataset, vocab) = load(&a.data, a.vocab.as_ref(), cfg.data.max_words)?;
    let channels = dataset.feature_map(0)?.channels();
    let (dcfg, codec) = cfg.decoder(channels, vocab.len())?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let report = match &a.resume {
        Some(ckpt) => resume::<f32>(&dataset, ckpt, &cfg.train_config(), &a.out)?.1,
        None => {
            let mut model = Model32::new(dcfg, codec, cfg.seed)?;
            train(&dataset, &mut model, &cfg.train_config(), &a.out)?
        }
    };
    let cfg_path = a.out.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, to_json(&cfg)?).map_err(io_err(&cfg_path))?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  nll {:.4}  attn {:.4}  l2 {:.4}  {:.1}s",
            e.epoch, e.lr, e.loss_total, e.loss_nll, e.loss_attn, e.loss_l2, e.wall_s
        );
    }
    println!("model -> {}", report.final_checkpoint.display());
    Ok(())
}

fn check_vocab(model: &Model32, vocab: &Vocabulary) -> Result<()> {
    let ok = match model.codec {
        TokenCodec::Word { vocab_size } => vocab_size == vocab.len(),
        TokenCodec::Radix(rc) => rc.capacity() >= vocab.len(),
    };
    if !ok {
        return Err(Error::Config(format!(
            "vocabulary of {} entries does not match the model's codec {:?}",
            vocab.len(),
            model.codec
        )));
    }
    Ok(())
}

fn inference_config(cfg: &RunConfig, codec: &TokenCodec, beam: Option<usize>, max_tokens: Option<usize>) -> Result<InferenceConfig> {
    let mut inf = cfg.inference(codec);
    if let Some(b) = beam {
        inf.beam_size = b;
    }
    if let Some(m) = max_tokens {
        inf.max_tokens = m;
    }
    inf.validate()?;
    Ok(inf)
}

/// Captions for every record, in dataset order.
pub fn caption_all(model: &Model32, dataset: &Dataset, vocab: &Vocabulary, inf: &InferenceConfig, jobs: usize) -> Result<Vec<CaptionLine>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                let fm = dataset.feature_map(i)?;
                let c = caption(model, &fm, vocab, inf)?;
                Ok(CaptionLine {
                    id: dataset.records[i].id.clone(),
                    caption: c.text,
                    valid: c.valid,
                })
            })
            .collect()
    })
}

fn caption_cmd(cfg: RunConfig, a: CaptionArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(Error::Argument("--jobs must be >= 1".into()));
    }
    let model = Model32::load(&a.model)?;
    let (dataset, vocab) = load(&a.data, a.vocab.as_ref(), cfg.data.max_words)?;
    check_vocab(&model, &vocab)?;
    let inf = inference_config(&cfg, &model.codec, a.beam, a.max_tokens)?;
    let lines = caption_all(&model, &dataset, &vocab, &inf, a.jobs)?;
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    emit(a.out.as_ref(), &text)
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionLine>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| Error::Format {
                offset,
                msg: format!("bad caption line: {e}"),
            })?);
        }
        offset += line.len() + 1;
    }
    if out.is_empty() {
        return Err(Error::Argument(format!("{} holds no captions", path.display())));
    }
    Ok(out)
}

/// Normalised captions of a dataset, for the uniqueness statistic.
fn caption_set(data: &Path) -> Result<HashSet<String>> {
    Ok(read_records(&dataset_file(data))?
        .iter()
        .flat_map(|r| r.captions.iter().map(|c| normalize_caption(c)))
        .collect())
}

fn eval(a: EvalArgs) -> Result<()> {
    let generated = read_captions(&a.captions)?;
    let records = read_records(&dataset_file(&a.data))?;
    let by_id: HashMap<&str, &Vec<String>> = records.iter().map(|r| (r.id.as_str(), &r.captions)).collect();
    let mut refs = Vec::with_capacity(generated.len());
    for g in &generated {
        let r = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Argument(format!("caption for unknown record {}", g.id)))?;
        refs.push((*r).clone());
    }
    let training = match &a.training {
        Some(p) => caption_set(p)?,
        None => HashSet::new(),
    };
    let texts: Vec<&str> = generated.iter().map(|g| g.caption.as_str()).collect();
    let report = evaluate(&texts, &refs, &training)?;
    emit(a.out.as_ref(), &to_json(&report)?)
}

#[derive(Serialize)]
struct StatsReport {
    unique_pct: f64,
    avg_len: f64,
    n: usize,
}

fn stats(a: StatsArgs) -> Result<()> {
    let generated = read_captions(&a.captions)?;
    let texts: Vec<&str> = generated.iter().map(|g| g.caption.as_str()).collect();
    let (unique_pct, avg_len) = caption_stats(&texts, &caption_set(&a.training)?)?;
    emit(
        a.out.as_ref(),
        &to_json(&StatsReport {
            unique_pct,
            avg_len,
            n: texts.len(),
        })?,
    )
}

fn params(mut cfg: RunConfig, a: ParamsArgs) -> Result<()> {
    if a.suite {
        let rows = reference_suite();
        print!("{}", format_suite(&rows));
        if let Some(p) = &a.json {
            fs::write(p, to_json(&rows)?).map_err(io_err(p))?;
        }
        return Ok(());
    }
    a.model.apply(&mut cfg)?;
    let count_words = a.vocab_size.expect("clap requires --vocab-size");
    let vocab = match cfg.codec {
        CodecConfig::Radix { base, .. } => OutputVocab::Radix { base },
        CodecConfig::Word => OutputVocab::Words {
            count: count_words,
            specials_included: false,
        },
    };
    if let CodecConfig::Radix { .. } = cfg.codec {
        cfg.codec.codec(count_words)?;
    }
    let m = &cfg.model;
    let spec = ModelSpec {
        vocab,
        word_size: m.word_size,
        state_size: m.state_size,
        mlp_size: m.mlp_size,
        projection: m.projection,
        heads: m.heads,
        feature_channels: a.channels,
        image_embed_size: a.embed_size,
        tie_embeddings: m.tie_embeddings,
    };
    let mut report = count(&spec)?;
    if let Some(r) = a.reference {
        report = report.against(r);
    }
    let json = to_json(&report)?;
    print!("{json}");
    if let Some(p) = &a.json {
        fs::write(p, &json).map_err(io_err(p))?;
    }
    Ok(())
}

fn attn_dump(cfg: RunConfig, a: AttnDumpArgs) -> Result<()> {
    let model = Model32::load(&a.model)?;
    let (dataset, vocab) = load(&a.data, a.vocab.as_ref(), cfg.data.max_words)?;
    check_vocab(&model, &vocab)?;
    if a.record >= dataset.len() {
        return Err(Error::Argument(format!(
            "record {} outside dataset of {}",
            a.record,
            dataset.len()
        )));
    }
    let fm = dataset.feature_map(a.record)?;
    let tokens = if a.tokens.is_empty() {
        let inf = inference_config(&cfg, &model.codec, None, None)?;
        let c = caption(&model, &fm, &vocab, &inf)?;
        println!("caption: {}", c.text);
        c.best.tokens.0
    } else {
        a.tokens.clone()
    };
    let dump = AttentionDump {
        grid: dataset.meta.grid,
        ..dump_attention(&model, &fm, &tokens)?
    };
    write_attention_dump(&dump, &a.out)?;
    println!("{} steps x {} heads -> {}", dump.maps.len(), dump.heads, a.out.display());
    Ok(())
}
