//! Synthetic compositional captioning task.
//!
//! A scene places 1–3 distinct (shape, colour) objects on a 4×4 grid. Every
//! grid cell is one feature location; an occupied cell carries its object's
//! signature (a fixed orthonormal direction per shape/colour pair) plus
//! Gaussian noise, an empty cell carries noise only. The caption lists the
//! objects in a fixed type order, e.g. "a red circle and a blue square".

use rand::seq::SliceRandom;
use rand::Rng;
use self::normal::standard_normal;

use super::dataset::{CaptionRecord, Dataset, DatasetMeta, FeatureRef};
use super::features::FeatureMap;
use super::vocab::{build_vocab, Vocabulary};
use crate::autodiff::rng::{streams, SeedTree};
use crate::error::{Error, Result};

pub const GRID_SIDE: usize = 4;
pub const LOCATIONS: usize = GRID_SIDE * GRID_SIDE;
pub const MIN_CHANNELS: usize = 32;
pub const MIN_VOCAB: usize = 300;
pub const MAX_OBJECTS: usize = 3;
/// Longest caption: three objects of three words plus two joiners.
pub const MAX_CAPTION_WORDS: usize = 3 * MAX_OBJECTS + (MAX_OBJECTS - 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
    Heart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Purple,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star, Shape::Heart];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
            Shape::Heart => "heart",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Blue, Color::Green, Color::Yellow, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }
}

pub const NUM_TYPES: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Row-major grid cell.
    pub cell: usize,
}

impl SceneObject {
    /// Index into the signature table.
    pub fn type_id(&self) -> usize {
        self.shape as usize * Color::ALL.len() + self.color as usize
    }

    fn from_type(type_id: usize, cell: usize) -> Self {
        SceneObject {
            shape: Shape::ALL[type_id / Color::ALL.len()],
            color: Color::ALL[type_id % Color::ALL.len()],
            cell,
        }
    }
}

/// Objects in canonical (type) order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::Range(format!("scene needs 1..={MAX_OBJECTS} objects")));
        }
        objects.sort_by_key(|o| o.type_id());
        for w in objects.windows(2) {
            if w[0].type_id() == w[1].type_id() {
                return Err(Error::Argument("duplicate object type in scene".into()));
            }
        }
        let mut cells: Vec<_> = objects.iter().map(|o| o.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.len() != objects.len() || cells.iter().any(|&c| c >= LOCATIONS) {
            return Err(Error::Argument("objects must occupy distinct grid cells".into()));
        }
        Ok(SyntheticScene { objects })
    }

    pub fn caption_tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                out.push("and");
            }
            out.extend(["a", o.color.word(), o.shape.word()]);
        }
        out
    }

    pub fn caption(&self) -> String {
        self.caption_tokens().join(" ")
    }

    /// Cell holding an object described by `word` (a shape or colour word).
    pub fn cells_for_word(&self, word: &str) -> Vec<usize> {
        self.objects
            .iter()
            .filter(|o| o.shape.word() == word || o.color.word() == word)
            .map(|o| o.cell)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub channels: usize,
    pub noise_sd: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            count: 2000,
            channels: 64,
            noise_sd: 0.05,
        }
    }
}

pub struct SynthOutput {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub scenes: Vec<SyntheticScene>,
    /// One unit vector of `channels` values per object type.
    pub signatures: Vec<Vec<f32>>,
}

impl SynthOutput {
    /// Nearest-signature reading of a feature map: a location whose norm is
    /// at least half the signature norm is assigned the best-matching type.
    pub fn decode_scene(&self, fm: &FeatureMap) -> Result<SyntheticScene> {
        decode_scene(fm, &self.signatures)
    }

    /// Feature map of `scene` without noise.
    pub fn render_clean(&self, scene: &SyntheticScene) -> FeatureMap {
        let channels = self.signatures[0].len();
        FeatureMap::new(LOCATIONS, channels, render(scene, &self.signatures, channels)).expect("finite signatures")
    }
}

pub fn decode_scene(fm: &FeatureMap, signatures: &[Vec<f32>]) -> Result<SyntheticScene> {
    let mut objects = Vec::new();
    for j in 0..fm.locations() {
        let loc = fm.location(j);
        let norm: f32 = loc.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm < 0.5 {
            continue;
        }
        let best = signatures
            .iter()
            .enumerate()
            .map(|(t, s)| (t, s.iter().zip(loc).map(|(a, b)| a * b).sum::<f32>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t)
            .ok_or_else(|| Error::Argument("empty signature table".into()))?;
        objects.push(SceneObject::from_type(best, j));
    }
    SyntheticScene::new(objects)
}

mod normal {
    use rand::Rng;

    /// Box–Muller standard normal.
    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

fn orthonormal_signatures(seeds: &SeedTree, channels: usize) -> Vec<Vec<f32>> {
    let mut rng = seeds.stream(&[streams::SYNTH, 0]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(NUM_TYPES);
    while basis.len() < NUM_TYPES {
        let mut v: Vec<f64> = (0..channels).map(|_| standard_normal(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

fn random_scene<R: Rng>(rng: &mut R) -> SyntheticScene {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let mut types: Vec<usize> = (0..NUM_TYPES).collect();
    types.shuffle(rng);
    let mut cells: Vec<usize> = (0..LOCATIONS).collect();
    cells.shuffle(rng);
    let objects = (0..n).map(|i| SceneObject::from_type(types[i], cells[i])).collect();
    SyntheticScene::new(objects).expect("generated scene is valid")
}

fn render(scene: &SyntheticScene, signatures: &[Vec<f32>], channels: usize) -> Vec<f32> {
    let mut data = vec![0f32; LOCATIONS * channels];
    for o in &scene.objects {
        data[o.cell * channels..(o.cell + 1) * channels].copy_from_slice(&signatures[o.type_id()]);
    }
    data
}

/// Deterministically generates `count` scenes, their feature maps and a
/// vocabulary padded with distractor tokens to at least 300 entries.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.count < 1 {
        return Err(Error::Range("synthetic count must be >= 1".into()));
    }
    if cfg.channels < MIN_CHANNELS {
        return Err(Error::Range(format!(
            "feature channels must be >= {MIN_CHANNELS}, got {}",
            cfg.channels
        )));
    }
    if !(cfg.noise_sd >= 0.0 && cfg.noise_sd.is_finite()) {
        return Err(Error::Range(format!("noise_sd must be finite and >= 0, got {}", cfg.noise_sd)));
    }
    let seeds = SeedTree::new(cfg.seed);
    let signatures = orthonormal_signatures(&seeds, cfg.channels);
    // Separate streams keep the scenes identical across noise levels.
    let mut rng = seeds.stream(&[streams::SYNTH, 1]);
    let mut noise = seeds.stream(&[streams::SYNTH, 2]);

    let mut scenes = Vec::with_capacity(cfg.count);
    let mut maps = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let scene = random_scene(&mut rng);
        let mut data = render(&scene, &signatures, cfg.channels);
        if cfg.noise_sd > 0.0 {
            for v in &mut data {
                *v += cfg.noise_sd * standard_normal(&mut noise) as f32;
            }
        }
        maps.push(FeatureMap::new(LOCATIONS, cfg.channels, data)?);
        scenes.push(scene);
    }

    let tokenized: Vec<Vec<&str>> = scenes.iter().map(|s| s.caption_tokens()).collect();
    let base = build_vocab(&tokenized, 1)?;
    let mut words: Vec<(String, u64)> = base.entries()[..base.len() - 1].to_vec();
    let mut k = 0;
    while words.len() + 1 < MIN_VOCAB {
        words.push((format!("zz{k:03}"), 1));
        k += 1;
    }
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let vocab = Vocabulary::from_ranked(words, 0)?;

    let records = scenes
        .iter()
        .zip(maps)
        .enumerate()
        .map(|(i, (scene, fm))| CaptionRecord {
            id: format!("synth{i:05}"),
            features: FeatureRef::Inline(fm),
            captions: vec![scene.caption_tokens().iter().map(|t| vocab.id_or_unk(t)).collect()],
        })
        .collect();
    let dataset = Dataset {
        records,
        meta: DatasetMeta {
            grid: Some([GRID_SIDE, GRID_SIDE]),
            max_len: MAX_CAPTION_WORDS,
        },
    };
    Ok(SynthOutput {
        dataset,
        vocab,
        scenes,
        signatures,
    })
}
