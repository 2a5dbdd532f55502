//! Caption generation: beam search, greedy decoding and attention dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{self, ProjectedFeatures};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{FeatureMap, Vocabulary};
use crate::decoder::{image_embedding, init_state, step, DecoderState, Model, ModelVars};
use crate::error::{Error, Result};
use crate::radix::{DecodedCaption, DigitSequence, TokenCodec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub beam_size: usize,
    /// Longest sequence considered, GO and EOS included.
    pub max_tokens: usize,
}

impl InferenceConfig {
    /// Beam of three and room for `max_words` words plus GO/EOS.
    pub fn for_codec(codec: &TokenCodec, max_words: usize) -> Self {
        InferenceConfig {
            beam_size: 3,
            max_tokens: codec.max_tokens(max_words),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_tokens < 2 {
            return Err(Error::Config(format!(
                "need beam size >= 1 and max tokens >= 2, got {} and {}",
                self.beam_size, self.max_tokens
            )));
        }
        Ok(())
    }
}

/// Result of advancing one hypothesis by one token.
#[derive(Debug, Clone)]
pub struct Advance<S> {
    /// Log-probabilities over the whole encoded vocabulary.
    pub log_probs: Vec<f64>,
    pub state: S,
    /// Attention weights used for this step, `g` rows of `|F|`, flattened.
    pub attention: Vec<f64>,
}

/// Anything that can score next tokens given a state.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn go(&self) -> usize;
    fn eos(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    /// Feeds `tokens[i]` to `states[i]` for every live hypothesis.
    fn advance(&self, states: &[Self::State], tokens: &[usize]) -> Result<Vec<Advance<Self::State>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with GO.
    pub tokens: DigitSequence,
    pub log_prob: f64,
    pub finished: bool,
    /// One flattened `g × |F|` map per generated token.
    pub attention_trace: Vec<Vec<f64>>,
}

struct Live<S> {
    hyp: Hypothesis,
    state: Option<S>,
}

/// Beam search without length normalisation. Finished hypotheses stay in
/// the pool and compete with live ones; equal scores prefer the sequence
/// with the lower token id at the first difference. Returns the final beam,
/// best first.
pub fn beam_search<M: StepModel>(model: &M, cfg: &InferenceConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let (go, eos) = (model.go(), model.eos());
    let mut beam = vec![Live {
        hyp: Hypothesis {
            tokens: DigitSequence(vec![go]),
            log_prob: 0.0,
            finished: false,
            attention_trace: Vec::new(),
        },
        state: Some(model.start()?),
    }];
    for _ in 1..cfg.max_tokens {
        let live: Vec<usize> = (0..beam.len()).filter(|&i| !beam[i].hyp.finished).collect();
        if live.is_empty() {
            break;
        }
        let states: Vec<M::State> = live.iter().map(|&i| beam[i].state.clone().expect("live state")).collect();
        let last: Vec<usize> = live.iter().map(|&i| *beam[i].hyp.tokens.0.last().expect("non-empty")).collect();
        let advances = model.advance(&states, &last)?;

        // (score, beam index, appended token or None for a frozen hypothesis, advance index)
        let mut cands: Vec<(f64, usize, Option<usize>, usize)> = Vec::new();
        for (i, entry) in beam.iter().enumerate() {
            if entry.hyp.finished {
                cands.push((entry.hyp.log_prob, i, None, 0));
            }
        }
        for (a, &i) in live.iter().enumerate() {
            let base = beam[i].hyp.log_prob;
            for (tok, &lp) in advances[a].log_probs.iter().enumerate() {
                cands.push((base + lp, i, Some(tok), a));
            }
        }
        let key = |c: &(f64, usize, Option<usize>, usize)| -> (f64, Vec<usize>) {
            let mut seq = beam[c.1].hyp.tokens.0.clone();
            seq.extend(c.2);
            (c.0, seq)
        };
        cands.sort_by(|x, y| {
            let (sx, qx) = key(x);
            let (sy, qy) = key(y);
            sy.total_cmp(&sx).then_with(|| qx.cmp(&qy))
        });
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (score, i, tok, a) in cands {
            match tok {
                None => next.push(Live {
                    hyp: beam[i].hyp.clone(),
                    state: None,
                }),
                Some(tok) => {
                    let mut hyp = beam[i].hyp.clone();
                    hyp.tokens.0.push(tok);
                    hyp.log_prob = score;
                    hyp.finished = tok == eos;
                    hyp.attention_trace.push(advances[a].attention.clone());
                    let state = if hyp.finished { None } else { Some(advances[a].state.clone()) };
                    next.push(Live { hyp, state });
                }
            }
        }
        beam = next;
    }
    Ok(beam.into_iter().map(|l| l.hyp).collect())
}

/// Picks the most likely token at every step (lowest id on ties).
pub fn greedy<M: StepModel>(model: &M, max_tokens: usize) -> Result<Hypothesis> {
    if max_tokens < 2 {
        return Err(Error::Config(format!("max tokens must be >= 2, got {max_tokens}")));
    }
    let mut hyp = Hypothesis {
        tokens: DigitSequence(vec![model.go()]),
        log_prob: 0.0,
        finished: false,
        attention_trace: Vec::new(),
    };
    let mut state = model.start()?;
    while hyp.tokens.len() < max_tokens {
        let last = *hyp.tokens.0.last().expect("non-empty");
        let adv = model.advance(std::slice::from_ref(&state), &[last])?.remove(0);
        let mut best = 0;
        for (t, &lp) in adv.log_probs.iter().enumerate() {
            if lp > adv.log_probs[best] {
                best = t;
            }
        }
        hyp.tokens.0.push(best);
        hyp.log_prob += adv.log_probs[best];
        hyp.attention_trace.push(adv.attention);
        state = adv.state;
        if best == model.eos() {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Hidden and cell vectors of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorState<T> {
    pub h: Vec<T>,
    pub cell: Vec<T>,
}

/// A trained decoder bound to one image.
pub struct ImageDecoder<'a, T> {
    model: &'a Model<T>,
    scores: Tensor<T>,
    values: Tensor<T>,
    initial: VectorState<T>,
    locations: usize,
}

impl<'a, T: Scalar> ImageDecoder<'a, T> {
    pub fn new(model: &'a Model<T>, features: &FeatureMap) -> Result<Self> {
        let cfg = &model.cfg;
        if features.channels() != cfg.attention.feature_channels || features.channels() != cfg.image_embed_size {
            return Err(Error::Argument(format!(
                "feature map has {} channels, model expects {}",
                features.channels(),
                cfg.attention.feature_channels
            )));
        }
        let mut tape = Tape::new();
        let vars = ModelVars::load(&mut tape, model);
        let f = tape.leaf(Tensor::from_vec(
            &[features.locations(), features.channels()],
            features.data().iter().map(|&v| T::of_f32(v)).collect(),
        )?);
        let proj = attention::precompute_projection(&mut tape, f, features.locations(), &vars.attention, &cfg.attention)?;
        let embed: Vec<T> = image_embedding(features).into_iter().map(T::of_f32).collect();
        let e = tape.leaf(Tensor::from_vec(&[1, embed.len()], embed)?);
        let s = init_state(&mut tape, &vars, e, cfg)?;
        Ok(ImageDecoder {
            model,
            scores: tape.value(proj.scores).clone(),
            values: tape.value(proj.values).clone(),
            initial: VectorState {
                h: tape.value(s.h).data().to_vec(),
                cell: tape.value(s.cell).data().to_vec(),
            },
            locations: features.locations(),
        })
    }
}

fn repeat_block<T: Scalar>(t: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[t.rows() * times, t.cols()], data)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

impl<T: Scalar> StepModel for ImageDecoder<'_, T> {
    type State = VectorState<T>;

    fn vocab_size(&self) -> usize {
        self.model.cfg.encoded_vocab_size
    }

    fn go(&self) -> usize {
        self.model.codec.go()
    }

    fn eos(&self) -> usize {
        self.model.codec.eos()
    }

    fn start(&self) -> Result<Self::State> {
        Ok(self.initial.clone())
    }

    fn advance(&self, states: &[Self::State], tokens: &[usize]) -> Result<Vec<Advance<Self::State>>> {
        let b = states.len();
        let cfg = &self.model.cfg;
        let n = cfg.state_size;
        let mut tape = Tape::new();
        let vars = ModelVars::load(&mut tape, self.model);
        let scores = tape.leaf(repeat_block(&self.scores, b)?);
        let values = tape.leaf(repeat_block(&self.values, b)?);
        let projected = ProjectedFeatures {
            scores,
            values,
            batch: b,
            locations: self.locations,
        };
        let h = tape.leaf(Tensor::from_vec(&[b, n], states.iter().flat_map(|s| s.h.iter().copied()).collect())?);
        let cell = tape.leaf(Tensor::from_vec(&[b, n], states.iter().flat_map(|s| s.cell.iter().copied()).collect())?);
        let out = step(&mut tape, &vars, DecoderState { h, cell }, tokens, &projected, cfg, None)?;
        let logits = tape.value(out.logits);
        let alpha = tape.value(out.alpha);
        let (hv, cv) = (tape.value(out.state.h), tape.value(out.state.cell));
        let g = cfg.attention.heads;
        let f = self.locations;
        Ok((0..b)
            .map(|i| {
                let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
                let mut attention = Vec::with_capacity(g * f);
                for head in 0..g {
                    attention.extend((0..f).map(|j| alpha.row(i * f + j)[head].to_f64_lossy()));
                }
                Advance {
                    log_probs: log_softmax_row(&row),
                    state: VectorState {
                        h: hv.row(i).to_vec(),
                        cell: cv.row(i).to_vec(),
                    },
                    attention,
                }
            })
            .collect())
    }
}

/// A generated caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    /// False when the token stream could not be decoded cleanly.
    pub valid: bool,
    pub words: Vec<usize>,
    pub best: Hypothesis,
}

/// Decodes a token stream into words and text.
pub fn render_tokens(tokens: &[usize], codec: &TokenCodec, vocab: &Vocabulary) -> (DecodedCaption, String) {
    let decoded = codec.decode(tokens, vocab.len(), vocab.unk_id());
    let text = vocab.render(&decoded.words);
    (decoded, text)
}

/// Top beam hypothesis, post-processed into text.
pub fn caption<T: Scalar>(model: &Model<T>, features: &FeatureMap, vocab: &Vocabulary, cfg: &InferenceConfig) -> Result<Caption> {
    let dec = ImageDecoder::new(model, features)?;
    let best = if cfg.beam_size == 1 {
        greedy(&dec, cfg.max_tokens)?
    } else {
        beam_search(&dec, cfg)?.remove(0)
    };
    let (decoded, text) = render_tokens(&best.tokens, &model.codec, vocab);
    Ok(Caption {
        text,
        valid: decoded.valid,
        words: decoded.words,
        best,
    })
}

/// Attention recorded while replaying a token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub heads: usize,
    pub locations: usize,
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
    /// Token emitted at each step.
    pub tokens: Vec<usize>,
    /// `maps[step][head][location]`
    #[serde(skip)]
    pub maps: Vec<Vec<Vec<f64>>>,
}

/// Re-runs the decoder on `tokens` (GO first) and records every head's
/// weights at each step.
pub fn dump_attention<T: Scalar>(model: &Model<T>, features: &FeatureMap, tokens: &[usize]) -> Result<AttentionDump> {
    let v = model.cfg.encoded_vocab_size;
    if tokens.len() < 2 || tokens[0] != model.codec.go() {
        return Err(Error::Argument("token sequence must start with GO and contain at least one step".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(Error::Argument(format!("token {bad} outside encoded vocabulary of {v}")));
    }
    let dec = ImageDecoder::new(model, features)?;
    let g = model.cfg.attention.heads;
    let f = features.locations();
    let mut state = dec.start()?;
    let mut maps = Vec::with_capacity(tokens.len() - 1);
    for t in 0..tokens.len() - 1 {
        let adv = dec.advance(std::slice::from_ref(&state), &tokens[t..t + 1])?.remove(0);
        maps.push(adv.attention.chunks(f).map(<[f64]>::to_vec).collect::<Vec<_>>());
        state = adv.state;
    }
    Ok(AttentionDump {
        heads: g,
        locations: f,
        grid: None,
        tokens: tokens[1..].to_vec(),
        maps,
    })
}

/// Writes the dump as CSV (`step,head,loc_0,…`) plus a JSON sidecar.
pub fn write_attention_dump(dump: &AttentionDump, csv_path: &Path) -> Result<()> {
    if let Some([r, c]) = dump.grid {
        if r * c != dump.locations {
            return Err(Error::Argument(format!(
                "grid {r}×{c} does not match {} locations",
                dump.locations
            )));
        }
    }
    let mut out = String::from("step,head");
    for j in 0..dump.locations {
        out.push_str(&format!(",loc_{j}"));
    }
    out.push('\n');
    for (s, heads) in dump.maps.iter().enumerate() {
        for (h, row) in heads.iter().enumerate() {
            out.push_str(&format!("{s},{h}"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    let mut f = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(csv_path, e))?;
    let side = csv_path.with_extension("json");
    fs::write(&side, serde_json::to_string_pretty(dump)? + "\n").map_err(|e| Error::io(&side, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution depends only on the previous token.
    struct Bigram {
        table: Vec<Vec<f64>>,
    }

    impl StepModel for Bigram {
        type State = ();
        fn vocab_size(&self) -> usize {
            self.table.len()
        }
        fn go(&self) -> usize {
            self.table.len() - 2
        }
        fn eos(&self) -> usize {
            self.table.len() - 1
        }
        fn start(&self) -> Result<()> {
            Ok(())
        }
        fn advance(&self, states: &[()], tokens: &[usize]) -> Result<Vec<Advance<()>>> {
            Ok(states
                .iter()
                .zip(tokens)
                .map(|(_, &t)| Advance {
                    log_probs: self.table[t].iter().map(|p| p.ln()).collect(),
                    state: (),
                    attention: vec![],
                })
                .collect())
        }
    }

    #[test]
    fn one_hot_model_has_zero_log_prob() {
        let m = Bigram {
            table: vec![
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        };
        let beam = beam_search(&m, &InferenceConfig { beam_size: 3, max_tokens: 5 }).unwrap();
        assert_eq!(beam[0].tokens.0, vec![2, 0, 3]);
        assert_eq!(beam[0].log_prob, 0.0);
        assert!(beam[0].finished);
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = Bigram {
            table: vec![
                vec![0.1, 0.5, 0.0, 0.4],
                vec![0.6, 0.1, 0.0, 0.3],
                vec![0.45, 0.55, 0.0, 0.0],
                vec![0.25, 0.25, 0.25, 0.25],
            ],
        };
        let b = beam_search(&m, &InferenceConfig { beam_size: 1, max_tokens: 6 }).unwrap();
        let g = greedy(&m, 6).unwrap();
        assert_eq!(b[0], g);
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let m = Bigram {
            table: vec![
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.5, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        };
        let beam = beam_search(&m, &InferenceConfig { beam_size: 2, max_tokens: 4 }).unwrap();
        assert_eq!(beam[0].tokens.0, vec![2, 0, 3]);
        assert_eq!(beam[1].tokens.0, vec![2, 1, 3]);
        assert_eq!(greedy(&m, 4).unwrap().tokens.0, vec![2, 0, 3]);
    }
}
