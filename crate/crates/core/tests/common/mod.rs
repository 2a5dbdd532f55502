//! Reference implementations shared by the integration tests. Everything
//! here is written with plain loops over `f64` and does not call into the
//! library's numeric kernels.
#![allow(dead_code)]

use comic_core::attention::{AttentionConfig, Projection};
use comic_core::autodiff::{ParameterSet, SeedTree, Tensor};
use comic_core::inference::{Advance, StepModel};
use comic_core::Result;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = SeedTree::new(seed).stream(&[77]);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter with uniform noise in `±scale`; layer-norm
/// gains are kept around one.
pub fn randomize(set: &mut ParameterSet<f64>, seed: u64, scale: f64) {
    let names: Vec<(String, Vec<usize>)> = set.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (i, (name, shape)) in names.into_iter().enumerate() {
        let mut t = random_tensor(&shape, seed * 1000 + i as u64, scale);
        if name.contains("gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        set.set_value(&name, t).unwrap();
    }
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-6).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| g * (v - mean) / sd + b)
        .collect()
}

pub fn softmax(e: &[f64], temperature: f64) -> Vec<f64> {
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

/// Weights of one additive-attention MLP.
pub struct Mlp {
    pub w0: Vec<Vec<f64>>,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Single-head additive attention:
/// `e_j = w2 · tanh(LN(W0 f_j + W1 h))`, `α = softmax(e / ε)`, `c = Σ α_j v_j`.
pub fn single_head(mlp: &Mlp, features: &[Vec<f64>], values: &[Vec<f64>], h: &[f64], temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let hp = matvec(&mlp.w1, h);
    let e: Vec<f64> = features
        .iter()
        .map(|f| {
            let pre: Vec<f64> = matvec(&mlp.w0, f).iter().zip(&hp).map(|(a, b)| a + b).collect();
            let ln = layer_norm(&pre, &mlp.gain, &mlp.bias);
            ln.iter().zip(&mlp.w2).map(|(v, w)| v.tanh() * w).sum()
        })
        .collect();
    let alpha = softmax(&e, temperature);
    let dim = values[0].len();
    let mut c = vec![0.0; dim];
    for (a, v) in alpha.iter().zip(values) {
        for d in 0..dim {
            c[d] += a * v[d];
        }
    }
    (alpha, c)
}

/// Reads the attention weights of `set` as one MLP per head, with each head
/// owning a contiguous block of rows, and evaluates them independently.
/// Returns per-head weights and the concatenated context.
pub fn multi_head(set: &ParameterSet<f64>, cfg: &AttentionConfig, features: &[Vec<f64>], h: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let get = |n: &str| set.by_name(n).unwrap().value.clone();
    let w0 = rows(&get("attention/W_M0"));
    let w1 = rows(&get("attention/W_M1"));
    let w2 = get("attention/W_M2").data().to_vec();
    let gain = get("attention/ln_gain").data().to_vec();
    let bias = get("attention/ln_bias").data().to_vec();
    let values: Vec<Vec<f64>> = match cfg.projection {
        Projection::None => features.to_vec(),
        Projection::Untied { .. } => {
            let wf = rows(&get("attention/W_f"));
            features.iter().map(|f| matvec(&wf, f)).collect()
        }
        Projection::Tied => features.iter().map(|f| matvec(&w0, f)).collect(),
    };
    let g = cfg.heads;
    let kb = cfg.mlp_size / g;
    let vb = values[0].len() / g;
    let mut weights = Vec::new();
    let mut context = Vec::new();
    for head in 0..g {
        let r = head * kb..(head + 1) * kb;
        let mlp = Mlp {
            w0: w0[r.clone()].to_vec(),
            w1: w1[r.clone()].to_vec(),
            w2: w2[r.clone()].to_vec(),
            gain: gain[r.clone()].to_vec(),
            bias: bias[r].to_vec(),
        };
        let vals: Vec<Vec<f64>> = values.iter().map(|v| v[head * vb..(head + 1) * vb].to_vec()).collect();
        let (a, c) = single_head(&mlp, features, &vals, h, cfg.temperature);
        weights.push(a);
        context.extend(c);
    }
    (weights, context)
}

/// A step model whose next-token distribution is a fixed table indexed by
/// (position, previous token).
pub struct TableModel {
    /// `table[pos][prev]` is a probability vector over the vocabulary.
    pub table: Vec<Vec<Vec<f64>>>,
    pub vocab: usize,
}

impl TableModel {
    /// GO = vocab − 2 and EOS = vocab − 1; every distribution is random
    /// with strictly positive entries.
    pub fn random(vocab: usize, steps: usize, seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).stream(&[5]);
        let table = (0..steps)
            .map(|_| {
                (0..vocab)
                    .map(|_| {
                        let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0f64).powi(3)).collect();
                        let s: f64 = raw.iter().sum();
                        raw.into_iter().map(|v| v / s).collect()
                    })
                    .collect()
            })
            .collect();
        TableModel { table, vocab }
    }

    pub fn log_prob(&self, pos: usize, prev: usize, tok: usize) -> f64 {
        self.table[pos][prev][tok].ln()
    }
}

impl StepModel for TableModel {
    type State = usize;

    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn go(&self) -> usize {
        self.vocab - 2
    }
    fn eos(&self) -> usize {
        self.vocab - 1
    }
    fn start(&self) -> Result<usize> {
        Ok(0)
    }
    fn advance(&self, states: &[usize], tokens: &[usize]) -> Result<Vec<Advance<usize>>> {
        Ok(states
            .iter()
            .zip(tokens)
            .map(|(&pos, &tok)| Advance {
                log_probs: (0..self.vocab).map(|v| self.log_prob(pos, tok, v)).collect(),
                state: pos + 1,
                attention: Vec::new(),
            })
            .collect())
    }
}

/// Best sequence over every sequence that starts with GO and either ends at
/// its first EOS or reaches `max_tokens` tokens. Ties go to the
/// lexicographically smaller sequence.
pub fn exhaustive_best(model: &TableModel, max_tokens: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(vec![model.go()], 0.0f64)];
    while let Some((seq, lp)) = stack.pop() {
        let done = seq.len() > 1 && *seq.last().unwrap() == model.eos();
        if done || seq.len() == max_tokens {
            let better = match &best {
                None => true,
                Some((bs, bl)) => lp > *bl || (lp == *bl && seq < *bs),
            };
            if better {
                best = Some((seq, lp));
            }
            continue;
        }
        let pos = seq.len() - 1;
        let prev = *seq.last().unwrap();
        for t in 0..model.vocab {
            let mut next = seq.clone();
            next.push(t);
            stack.push((next, lp + model.log_prob(pos, prev, t)));
        }
    }
    best.unwrap()
}

pub fn attention_config(projection: Projection, heads: usize, k: usize, r: usize, n: usize) -> AttentionConfig {
    AttentionConfig {
        heads,
        mlp_size: k,
        projection,
        temperature: 1.0,
        feature_channels: r,
        state_size: n,
    }
}
