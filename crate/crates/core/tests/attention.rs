mod common;

use comic_core::attention::{attend_once, attention_param_count, AttentionConfig, AttentionParams, Projection};
use comic_core::autodiff::{ParameterSet, SeedTree};
use comic_core::corpus::FeatureMap;
use comic_core::Error;
use common::{attention_config, multi_head, randomize, single_head, Mlp};
use rand::Rng;

const MODES: [Projection; 3] = [Projection::None, Projection::Untied { q: 8 }, Projection::Tied];

fn params(cfg: &AttentionConfig, seed: u64) -> ParameterSet<f64> {
    let mut set = ParameterSet::new();
    AttentionParams::register(&mut set, cfg).unwrap();
    randomize(&mut set, seed, 0.8);
    set
}

fn random_input(locations: usize, channels: usize, n: usize, seed: u64) -> (FeatureMap, Vec<f64>) {
    let mut rng = SeedTree::new(seed).stream(&[1]);
    let data = (0..locations * channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let h = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (FeatureMap::new(locations, channels, data).unwrap(), h)
}

fn feature_rows(fm: &FeatureMap) -> Vec<Vec<f64>> {
    (0..fm.locations())
        .map(|j| fm.location(j).iter().map(|&v| v as f64).collect())
        .collect()
}

#[test]
fn weights_sum_to_one_for_every_head() {
    for mode in MODES {
        for g in [1, 2, 4] {
            let cfg = attention_config(mode, g, 8, 12, 8);
            let set = params(&cfg, 3);
            for i in 0..200 {
                let (fm, h) = random_input(5, 12, 8, i);
                let out = attend_once(&fm, &h, &set, &cfg).unwrap();
                assert_eq!(out.weights.len(), g);
                for w in &out.weights {
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(w.iter().all(|&a| a >= 0.0));
                }
                assert_eq!(out.context.len(), cfg.context_dim());
            }
        }
    }
}

#[test]
fn single_head_matches_formula() {
    for mode in MODES {
        let cfg = attention_config(mode, 1, 8, 12, 8);
        let set = params(&cfg, 11);
        for i in 0..50 {
            let (fm, h) = random_input(6, 12, 8, 100 + i);
            let out = attend_once(&fm, &h, &set, &cfg).unwrap();
            let (alpha, ctx) = multi_head(&set, &cfg, &feature_rows(&fm), &h);
            for (a, b) in out.weights[0].iter().zip(&alpha[0]) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            for (a, b) in out.context.iter().zip(&ctx) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn heads_are_independent_block_mlps() {
    for mode in MODES {
        for g in [2, 4] {
            let cfg = attention_config(mode, g, 8, 12, 8);
            let set = params(&cfg, 21 + g as u64);
            let (fm, h) = random_input(7, 12, 8, 9);
            let out = attend_once(&fm, &h, &set, &cfg).unwrap();
            let (alpha, ctx) = multi_head(&set, &cfg, &feature_rows(&fm), &h);
            for (ours, theirs) in out.weights.iter().zip(&alpha) {
                for (a, b) in ours.iter().zip(theirs) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
            for (a, b) in out.context.iter().zip(&ctx) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn hand_computed_two_locations() {
    // k = r = n = 2, one head, identity W_M0, zero W_M1, LN gain 1 bias 0.
    // f_0 = (1, 0) normalises to (1, -1)/sqrt(1/4 + 1e-6)·(1/2); f_1 = (0, 1)
    // to the mirror image, so with W_M2 = (1, 0) the scores are ±tanh(z).
    let cfg = attention_config(Projection::None, 1, 2, 2, 2);
    let mut set = ParameterSet::<f64>::new();
    AttentionParams::register(&mut set, &cfg).unwrap();
    set.set_value("attention/W_M0", comic_core::Tensor64::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap())
        .unwrap();
    set.set_value("attention/W_M2", comic_core::Tensor64::from_rows(&[&[1.0, 0.0]]).unwrap())
        .unwrap();
    let fm = FeatureMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = attend_once(&fm, &[0.0, 0.0], &set, &cfg).unwrap();
    let z = 0.5 / (0.25f64 + 1e-6).sqrt();
    let e = z.tanh();
    let a0 = 1.0 / (1.0 + (-2.0 * e).exp());
    assert!((out.weights[0][0] - a0).abs() < 1e-12);
    assert!((out.context[0] - a0).abs() < 1e-12);
    assert!((out.context[1] - (1.0 - a0)).abs() < 1e-12);
}

#[test]
fn location_permutation_permutes_weights() {
    for mode in MODES {
        let cfg = attention_config(mode, 2, 8, 12, 8);
        let set = params(&cfg, 5);
        let (fm, h) = random_input(6, 12, 8, 44);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut data = Vec::new();
        for &p in &perm {
            data.extend_from_slice(fm.location(p));
        }
        let shuffled = FeatureMap::new(6, 12, data).unwrap();
        let a = attend_once(&fm, &h, &set, &cfg).unwrap();
        let b = attend_once(&shuffled, &h, &set, &cfg).unwrap();
        for head in 0..2 {
            for (j, &p) in perm.iter().enumerate() {
                assert!((b.weights[head][j] - a.weights[head][p]).abs() < 1e-12);
            }
        }
        for (x, y) in a.context.iter().zip(&b.context) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn temperature_limits() {
    let base = attention_config(Projection::Tied, 1, 8, 12, 8);
    let set = params(&base, 8);
    let (fm, h) = random_input(5, 12, 8, 2);
    let sharp = attend_once(&fm, &h, &set, &AttentionConfig { temperature: 1e-6, ..base }).unwrap();
    let soft = attend_once(&fm, &h, &set, &AttentionConfig { temperature: 1e6, ..base }).unwrap();
    let normal = attend_once(&fm, &h, &set, &base).unwrap();
    let argmax = normal.weights[0]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!((sharp.weights[0][argmax] - 1.0).abs() < 1e-9);
    for w in &soft.weights[0] {
        assert!((w - 0.2).abs() < 1e-5);
    }
}

#[test]
fn zero_weights_attend_uniformly() {
    let cfg = attention_config(Projection::None, 4, 8, 12, 8);
    let mut set = ParameterSet::<f64>::new();
    AttentionParams::register(&mut set, &cfg).unwrap();
    let (fm, h) = random_input(4, 12, 8, 1);
    let out = attend_once(&fm, &h, &set, &cfg).unwrap();
    for w in out.weights.iter().flatten() {
        assert_eq!(*w, 0.25);
    }
}

#[test]
fn parameter_count_does_not_depend_on_heads() {
    for mode in [Projection::None, Projection::Untied { q: 512 }, Projection::Tied] {
        let count = |g| attention_param_count(&attention_config(mode, g, 512, 832, 512)).unwrap();
        let one = count(1);
        for g in [2, 4, 8, 16] {
            assert_eq!(count(g), one);
        }
    }
}

#[test]
fn shape_errors() {
    let cfg = attention_config(Projection::Tied, 2, 8, 12, 8);
    let set = params(&cfg, 1);
    let (fm, _) = random_input(4, 12, 8, 1);
    assert!(matches!(attend_once(&fm, &[0.0; 7], &set, &cfg), Err(Error::Dimension { .. })));
    let (bad, h) = random_input(4, 10, 8, 1);
    assert!(matches!(attend_once(&bad, &h, &set, &cfg), Err(Error::Dimension { .. })));
}

#[test]
fn single_head_oracle_sanity() {
    // The oracle itself: uniform scores give the mean of the values.
    let mlp = Mlp {
        w0: vec![vec![0.0; 2]; 2],
        w1: vec![vec![0.0; 1]; 2],
        w2: vec![1.0, 1.0],
        gain: vec![1.0; 2],
        bias: vec![0.0; 2],
    };
    let (a, c) = single_head(&mlp, &[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![1.0], vec![3.0]], &[0.5], 1.0);
    assert_eq!(a, vec![0.5, 0.5]);
    assert_eq!(c, vec![2.0]);
}
