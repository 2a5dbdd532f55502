use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_feature_map, write_feature_map, FeatureMap};
use super::vocab::{write_vocab, Vocabulary};
use super::{tokenize, truncate_and_index};
use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const META_FILE: &str = "meta.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const FEATURE_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRef {
    Path(PathBuf),
    Inline(FeatureMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub features: FeatureRef,
    /// Word-id captions without specials.
    pub captions: Vec<Vec<usize>>,
}

/// Side information about a dataset, stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    /// Spatial layout of the feature locations, rows × cols.
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<CaptionRecord>,
    pub meta: DatasetMeta,
}

/// One line of `dataset.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonRecord {
    pub id: String,
    pub features: String,
    pub captions: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_map(&self, i: usize) -> Result<Cow<'_, FeatureMap>> {
        match &self.records[i].features {
            FeatureRef::Inline(fm) => Ok(Cow::Borrowed(fm)),
            FeatureRef::Path(p) => read_feature_map(p).map(Cow::Owned),
        }
    }

    /// Reads every referenced feature file into memory.
    pub fn preload(&mut self) -> Result<()> {
        for rec in &mut self.records {
            if let FeatureRef::Path(p) = &rec.features {
                rec.features = FeatureRef::Inline(read_feature_map(p)?);
            }
        }
        Ok(())
    }

    /// Splits off the last `n` records.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.records.len().saturating_sub(n);
        let tail = self.records.split_off(at);
        let meta = self.meta.clone();
        (self, Dataset { records: tail, meta })
    }
}

/// Reads raw JSON-lines records.
pub fn read_records(path: &Path) -> Result<Vec<JsonRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let rec: JsonRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                offset,
                msg: format!("bad dataset record: {e}"),
            })?;
            out.push(rec);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Tokenized captions of every record, for vocabulary building.
pub fn read_tokenized_captions(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_records(path)?
        .iter()
        .flat_map(|r| r.captions.iter().map(|c| tokenize(c)))
        .collect())
}

/// Loads a JSON-lines dataset. Feature paths are resolved relative to the
/// file's directory and read lazily. `meta.json` next to the file is used
/// when present.
pub fn load_dataset(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Dataset> {
    if max_len < 1 {
        return Err(Error::Argument("max_len must be >= 1".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let meta_path = base.join(META_FILE);
    let mut meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text)?
    } else {
        DatasetMeta::default()
    };
    meta.max_len = max_len;
    let records = read_records(path)?
        .into_iter()
        .map(|r| CaptionRecord {
            id: r.id,
            features: FeatureRef::Path(base.join(r.features)),
            captions: r
                .captions
                .iter()
                .map(|c| truncate_and_index(&tokenize(c), vocab, max_len))
                .collect(),
        })
        .collect();
    Ok(Dataset { records, meta })
}

/// Writes `dataset.jsonl`, `meta.json`, `vocab.tsv` and one `.fmap` per record
/// into `dir`.
pub fn save_dataset(dataset: &Dataset, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    let fdir = dir.join(FEATURE_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut lines = Vec::new();
    for (i, rec) in dataset.records.iter().enumerate() {
        let rel = format!("{FEATURE_DIR}/{}.fmap", rec.id);
        let fm = dataset.feature_map(i)?;
        write_feature_map(&fm, &dir.join(&rel))?;
        let json = JsonRecord {
            id: rec.id.clone(),
            features: rel,
            captions: rec.captions.iter().map(|c| vocab.render(c)).collect(),
        };
        serde_json::to_writer(&mut lines, &json)?;
        lines.push(b'\n');
    }
    let dpath = dir.join(DATASET_FILE);
    fs::File::create(&dpath)
        .and_then(|mut f| f.write_all(&lines))
        .map_err(|e| Error::io(&dpath, e))?;
    let mpath = dir.join(META_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&dataset.meta)?).map_err(|e| Error::io(&mpath, e))?;
    write_vocab(vocab, &dir.join(VOCAB_FILE))
}
