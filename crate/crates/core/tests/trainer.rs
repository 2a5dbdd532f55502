use std::fs;

use comic_core::attention::{AttentionConfig, Projection};
use comic_core::autodiff::{ParamKind, ParameterSet, Tensor};
use comic_core::corpus::{synth_generate, SynthConfig, SynthOutput};
use comic_core::decoder::{DecoderConfig, Model};
use comic_core::radix::{RadixConfig, TokenCodec};
use comic_core::trainer::{
    adam_step, epoch_checkpoint, resume, train, xavier_init, AdamState, EpochLog, TrainConfig, FINAL_CHECKPOINT,
    LOG_FILE,
};
use comic_core::Error;
use rand::SeedableRng;

fn data(count: usize) -> SynthOutput {
    synth_generate(&SynthConfig {
        seed: 5,
        count,
        channels: 32,
        noise_sd: 0.05,
    })
    .unwrap()
}

fn model(codec: TokenCodec) -> Model<f32> {
    let cfg = DecoderConfig {
        state_size: 16,
        word_size: 8,
        image_embed_size: 32,
        encoded_vocab_size: codec.encoded_vocab_size(),
        attention: AttentionConfig {
            heads: 2,
            mlp_size: 16,
            projection: Projection::Tied,
            temperature: 1.0,
            feature_channels: 32,
            state_size: 16,
        },
        dropout_rate: 0.0,
        tie_embeddings: true,
    };
    Model::new(cfg, codec, 11).unwrap()
}

fn radix() -> TokenCodec {
    TokenCodec::Radix(RadixConfig::new(32, 2).unwrap())
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr0: 1e-2,
        lr_min: 1e-3,
        halve_every_epochs: 1,
        epochs,
        batch_size: 4,
        dropout: 0.2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn read_log(dir: &std::path::Path) -> Vec<EpochLog> {
    fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn xavier_variance() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let t: Tensor<f64> = xavier_init(&[1000, 1000], &mut rng);
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let want = 2.0 / 2000.0;
    assert!((var - want).abs() / want < 0.1, "{var}");
}

#[test]
fn adam_first_step_and_bowl() {
    let mut set = ParameterSet::<f64>::new();
    set.add("w", ParamKind::Weight, Tensor::from_vec(&[3], vec![5.0, -3.0, 0.5]).unwrap())
        .unwrap();
    let target = [1.0, 2.0, -1.0];
    let cfg = TrainConfig::default();
    let mut state = AdamState::new(&set);
    let grad = |set: &mut ParameterSet<f64>| {
        let p = set.iter_mut().next().unwrap();
        let g: Vec<f64> = p.value.data().iter().zip(&target).map(|(w, c)| 2.0 * (w - c)).collect();
        p.grad = Tensor::from_vec(&[3], g).unwrap();
    };
    grad(&mut set);
    adam_step(&mut set, &mut state, 0.1, &cfg).unwrap();
    // Bias correction makes the first step lr·sign(g), up to eps.
    let w = set.iter().next().unwrap().value.data().to_vec();
    for (a, b) in w.iter().zip([4.9, -2.9, 0.4]) {
        assert!((a - b).abs() < 1e-7);
    }
    for _ in 0..2000 {
        grad(&mut set);
        adam_step(&mut set, &mut state, 0.05, &cfg).unwrap();
    }
    let w = set.iter().next().unwrap().value.data().to_vec();
    for (a, b) in w.iter().zip(target) {
        assert!((a - b).abs() < 1e-3, "{w:?}");
    }
    assert_eq!(state.step, 2001);

    let p = set.iter_mut().next().unwrap();
    p.grad.data_mut()[1] = f64::NAN;
    let before = set.clone();
    assert!(matches!(adam_step(&mut set, &mut state, 0.1, &cfg), Err(Error::Numeric(_))));
    assert_eq!(state.step, 2001);
    assert_eq!(set.iter().next().unwrap().value, before.iter().next().unwrap().value);
}

#[test]
fn two_epochs_leave_logs_and_checkpoints() {
    let out = data(10);
    let run = |dir: &std::path::Path| {
        let mut m = model(radix());
        let report = train(&out.dataset, &mut m, &quick(2), dir).unwrap();
        (m, report)
    };
    let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, report) = run(a_dir.path());
    let (b, _) = run(b_dir.path());
    assert_eq!(report.epochs.len(), 2);
    let log = read_log(a_dir.path());
    assert_eq!(log.len(), 2);
    for (i, e) in log.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert!(e.loss_total.is_finite() && e.loss_nll > 0.0 && e.loss_l2 > 0.0);
        assert!((e.loss_total - e.loss_nll - e.loss_attn - e.loss_l2).abs() < 1e-4 * e.loss_total);
        assert!(epoch_checkpoint(a_dir.path(), i).exists());
    }
    assert_eq!(log[0].lr, 1e-2);
    assert_eq!(log[1].lr, 5e-3);
    assert!(a_dir.path().join(FINAL_CHECKPOINT).exists());

    // Same seed, same numbers.
    assert_eq!(a.tensors(), b.tensors());
    let other = read_log(b_dir.path());
    for (x, y) in log.iter().zip(&other) {
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
    }
    let loaded = Model::<f32>::load(&a_dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(loaded.tensors(), a.tensors());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let out = data(10);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = model(radix());
    train(&out.dataset, &mut full, &quick(3), full_dir.path()).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut part = model(radix());
    train(&out.dataset, &mut part, &quick(1), part_dir.path()).unwrap();
    let (resumed, report) = resume::<f32>(
        &out.dataset,
        &epoch_checkpoint(part_dir.path(), 0),
        &quick(3),
        part_dir.path(),
    )
    .unwrap();
    assert_eq!(report.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(resumed.tensors(), full.tensors());
    assert_eq!(read_log(part_dir.path()).len(), 3);
}

#[test]
fn loss_falls_with_training() {
    let out = data(40);
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(TokenCodec::Word { vocab_size: out.vocab.len() });
    let cfg = TrainConfig {
        halve_every_epochs: 4,
        dropout: 0.0,
        ..quick(4)
    };
    let report = train(&out.dataset, &mut m, &cfg, dir.path()).unwrap();
    assert!(report.epochs[3].loss_nll < 0.8 * report.epochs[0].loss_nll);
}

#[test]
fn divergence_aborts_with_error() {
    let out = data(6);
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(radix());
    let id = m.params.id("decoder/E_o_bias").unwrap();
    m.params.get_mut(id).value.data_mut()[0] = f32::INFINITY;
    match train(&out.dataset, &mut m, &quick(2), dir.path()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("last good checkpoint"), "{msg}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rejects_bad_inputs() {
    let out = data(6);
    let dir = tempfile::tempdir().unwrap();
    // Word ids beyond a base-2 two-digit code.
    let mut m = model(TokenCodec::Radix(RadixConfig::new(2, 2).unwrap()));
    assert!(matches!(
        train(&out.dataset, &mut m, &quick(1), dir.path()),
        Err(Error::Range(_))
    ));
    let mut m = model(radix());
    let bad = TrainConfig { epochs: 0, ..quick(1) };
    assert!(matches!(train(&out.dataset, &mut m, &bad, dir.path()), Err(Error::Config(_))));
}
