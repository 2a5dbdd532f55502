mod common;

use comic_core::attention::{AttentionConfig, Projection};
use comic_core::autodiff::{Tape, Tensor};
use comic_core::corpus::{FeatureMap, Vocabulary};
use comic_core::decoder::{teacher_forced_loss, Batch, DecoderConfig, Model};
use comic_core::inference::{
    beam_search, caption, dump_attention, greedy, render_tokens, write_attention_dump, ImageDecoder, InferenceConfig,
    StepModel,
};
use comic_core::radix::{RadixConfig, TokenCodec};
use comic_core::Error;
use common::{exhaustive_best, randomize, TableModel};

fn cfg(beam_size: usize, max_tokens: usize) -> InferenceConfig {
    InferenceConfig { beam_size, max_tokens }
}

#[test]
fn wide_beam_is_exhaustive() {
    for seed in 0..20 {
        let m = TableModel::random(4, 4, seed);
        let (seq, lp) = exhaustive_best(&m, 5);
        let best = beam_search(&m, &cfg(256, 5)).unwrap().remove(0);
        assert_eq!(best.tokens.0, seq, "seed {seed}");
        assert!((best.log_prob - lp).abs() < 1e-12);
    }
}

#[test]
fn width_one_is_greedy() {
    for seed in 0..100 {
        let m = TableModel::random(6, 8, 1000 + seed);
        let g = greedy(&m, 8).unwrap();
        let b = beam_search(&m, &cfg(1, 8)).unwrap().remove(0);
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
        assert!((g.log_prob - b.log_prob).abs() < 1e-12);
    }
}

#[test]
fn beam_of_three_scores_at_least_greedy() {
    for seed in 0..40 {
        let codec = TokenCodec::Radix(RadixConfig::new(4, 2).unwrap());
        let mut model = small_model(Projection::Tied, 2, codec);
        randomize(&mut model.params, 100 + seed, 1.5);
        let dec = ImageDecoder::new(&model, &features(seed)).unwrap();
        let g = greedy(&dec, 10).unwrap();
        let b = beam_search(&dec, &cfg(3, 10)).unwrap().remove(0);
        assert!(b.log_prob >= g.log_prob - 1e-12, "seed {seed}: {} < {}", b.log_prob, g.log_prob);
    }
}

#[test]
fn narrow_beam_can_lose_to_greedy() {
    // Beam search gives no guarantee against greedy: a greedy prefix can be
    // pushed out of the beam by locally better candidates.
    let m = TableModel::random(6, 8, 5080);
    let g = greedy(&m, 8).unwrap();
    let beam = beam_search(&m, &cfg(3, 8)).unwrap();
    assert!(beam.iter().all(|h| h.tokens != g.tokens));
    let b = &beam[0];
    assert!(b.log_prob < g.log_prob);
    // Greedy's answer is still found by a wide enough beam.
    let wide = beam_search(&m, &cfg(64, 8)).unwrap().remove(0);
    assert!(wide.log_prob >= g.log_prob);
    // The returned score is still the exact sequence probability.
    let recomputed: f64 = (1..b.tokens.len()).map(|t| m.log_prob(t - 1, b.tokens[t - 1], b.tokens[t])).sum();
    assert!((recomputed - b.log_prob).abs() < 1e-12);
}

#[test]
fn beam_is_sorted_and_framed() {
    let m = TableModel::random(5, 6, 3);
    let beam = beam_search(&m, &cfg(4, 6)).unwrap();
    assert_eq!(beam.len(), 4);
    for w in beam.windows(2) {
        assert!(w[0].log_prob >= w[1].log_prob);
    }
    for h in &beam {
        assert_eq!(h.tokens[0], m.go());
        assert!(h.tokens.len() <= 6);
        assert_eq!(h.finished, *h.tokens.last().unwrap() == m.eos());
        // Nothing follows EOS.
        assert!(!h.tokens[1..h.tokens.len() - 1].contains(&m.eos()));
    }
    assert!(matches!(beam_search(&m, &cfg(0, 6)), Err(Error::Config(_))));
    assert!(matches!(greedy(&m, 1), Err(Error::Config(_))));
}

fn figure_vocab() -> Vocabulary {
    let mut words: Vec<(String, u64)> = (0..3000).map(|i| (format!("w{i:04}"), 1)).collect();
    words[0].0 = "a".into();
    words[2118].0 = "asphalt".into();
    Vocabulary::from_ranked(words, 0).unwrap()
}

#[test]
fn worked_example_renders() {
    let codec = TokenCodec::Radix(RadixConfig::new(128, 2).unwrap());
    let (d, text) = render_tokens(&[128, 0, 0, 16, 70, 129], &codec, &figure_vocab());
    assert!(d.valid);
    assert_eq!(text, "a asphalt");
    let (d, text) = render_tokens(&[128, 0, 0, 16, 129], &codec, &figure_vocab());
    assert!(!d.valid);
    assert_eq!(text, "a <unk>");
}

fn small_model(projection: Projection, heads: usize, codec: TokenCodec) -> Model<f64> {
    let cfg = DecoderConfig {
        state_size: 8,
        word_size: 6,
        image_embed_size: 12,
        encoded_vocab_size: codec.encoded_vocab_size(),
        attention: AttentionConfig {
            heads,
            mlp_size: 8,
            projection,
            temperature: 1.0,
            feature_channels: 12,
            state_size: 8,
        },
        dropout_rate: 0.0,
        tie_embeddings: false,
    };
    Model::new(cfg, codec, 2).unwrap()
}

fn features(seed: u64) -> FeatureMap {
    let t = common::random_tensor(&[5, 12], seed, 1.0);
    FeatureMap::new(5, 12, t.data().iter().map(|&v| v as f32).collect()).unwrap()
}

#[test]
fn immediate_eos_gives_empty_caption() {
    let codec = TokenCodec::Radix(RadixConfig::new(4, 2).unwrap());
    let mut model = small_model(Projection::Tied, 2, codec);
    let mut bias = Tensor::zeros(&[6]);
    bias.data_mut()[codec.eos()] = 50.0;
    model.params.set_value("decoder/E_o_bias", bias).unwrap();
    let vocab = Vocabulary::from_ranked((0..15).map(|i| (format!("t{i}"), 1)).collect(), 0).unwrap();
    for b in [1, 3] {
        let c = caption(&model, &features(1), &vocab, &InferenceConfig { beam_size: b, ..InferenceConfig::for_codec(&codec, 5) }).unwrap();
        assert_eq!(c.text, "");
        assert!(c.valid && c.words.is_empty());
        assert_eq!(c.best.tokens.0, [codec.go(), codec.eos()]);
    }
}

#[test]
fn step_scores_match_training_loss() {
    // Summed −log p along a sequence equals the teacher-forced NLL.
    for projection in [Projection::None, Projection::Untied { q: 4 }, Projection::Tied] {
        let codec = TokenCodec::Word { vocab_size: 7 };
        let mut model = small_model(projection, 2, codec);
        randomize(&mut model.params, 4, 0.5);
        let fm = features(3);
        let seq = vec![7, 2, 5, 5, 0, 8];
        let dec = ImageDecoder::new(&model, &fm).unwrap();
        let mut state = dec.start().unwrap();
        let mut nll = 0.0;
        for t in 0..seq.len() - 1 {
            let adv = dec.advance(std::slice::from_ref(&state), &[seq[t]]).unwrap().remove(0);
            let total: f64 = adv.log_probs.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            nll -= adv.log_probs[seq[t + 1]];
            state = adv.state;
        }
        let batch = Batch::<f64>::new(&[&fm], vec![seq]).unwrap();
        let mut tape = Tape::new();
        let loss = teacher_forced_loss(&mut tape, &model, &batch, 0.0, None).unwrap();
        assert!((loss.values(&tape).nll - nll).abs() < 1e-10, "{projection:?}");
    }
}

#[test]
fn attention_dump_rows_are_distributions() {
    let codec = TokenCodec::Word { vocab_size: 7 };
    let mut model = small_model(Projection::Tied, 4, codec);
    randomize(&mut model.params, 8, 0.7);
    let dump = dump_attention(&model, &features(2), &[7, 1, 2, 8]).unwrap();
    assert_eq!((dump.heads, dump.locations, dump.tokens.clone()), (4, 5, vec![1, 2, 8]));
    assert_eq!(dump.maps.len(), 3);
    for step in &dump.maps {
        assert_eq!(step.len(), 4);
        for row in step {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attn.csv");
    write_attention_dump(&dump, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,head,loc_0,loc_1,loc_2,loc_3,loc_4");
    assert_eq!(lines.len(), 1 + 3 * 4);
    assert!(path.with_extension("json").exists());

    assert!(matches!(dump_attention(&model, &features(2), &[1, 2]), Err(Error::Argument(_))));
    assert!(matches!(dump_attention(&model, &features(2), &[7, 9]), Err(Error::Argument(_))));
}

#[test]
fn zero_model_attends_uniformly() {
    let codec = TokenCodec::Word { vocab_size: 7 };
    let model = Model::<f64>::zeros(small_model(Projection::Untied { q: 8 }, 2, codec).cfg, codec).unwrap();
    let dump = dump_attention(&model, &features(5), &[7, 3, 8]).unwrap();
    for step in &dump.maps {
        for row in step {
            for &a in row {
                assert!((a - 0.2).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn decoder_rejects_mismatched_features() {
    let model = small_model(Projection::None, 1, TokenCodec::Word { vocab_size: 7 });
    let fm = FeatureMap::new(3, 10, vec![0.0; 30]).unwrap();
    assert!(ImageDecoder::new(&model, &fm).is_err());
}

#[test]
fn one_hot_model_has_single_certain_path() {
    // V = 4: content 0, 1; GO 2; EOS 3. Emits 1, 0, EOS with certainty.
    let path = [1, 0, 3, 3, 3];
    let table = (0..5)
        .map(|pos| {
            (0..4)
                .map(|_| (0..4).map(|t| if t == path[pos] { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let m = TableModel { table, vocab: 4 };
    let best = beam_search(&m, &cfg(3, 6)).unwrap().remove(0);
    assert_eq!(best.tokens.0, [2, 1, 0, 3]);
    assert_eq!(best.log_prob, 0.0);
    assert!(best.finished);
}
