use comic_core::corpus::{
    build_vocab, load_dataset, save_dataset, synth_generate, tokenize, Color, SceneObject, Shape, SynthConfig,
    SyntheticScene, DATASET_FILE, GRID_SIDE, MAX_CAPTION_WORDS,
};
use proptest::prelude::*;

fn small(seed: u64, noise_sd: f32) -> SynthConfig {
    SynthConfig {
        seed,
        count: 60,
        channels: 32,
        noise_sd,
    }
}

#[test]
fn synth_is_deterministic() {
    let a = synth_generate(&small(3, 0.05)).unwrap();
    let b = synth_generate(&small(3, 0.05)).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.vocab, b.vocab);
    assert_eq!(a.scenes, b.scenes);
    let c = synth_generate(&small(4, 0.05)).unwrap();
    assert_ne!(a.scenes, c.scenes);
}

#[test]
fn noise_level_does_not_change_scenes() {
    let a = synth_generate(&small(3, 0.0)).unwrap();
    let b = synth_generate(&small(3, 0.2)).unwrap();
    assert_eq!(a.scenes, b.scenes);
    assert_eq!(a.vocab, b.vocab);
}

#[test]
fn clean_maps_decode_exactly() {
    let out = synth_generate(&small(9, 0.0)).unwrap();
    for (i, scene) in out.scenes.iter().enumerate() {
        let fm = out.dataset.feature_map(i).unwrap();
        assert_eq!(&out.decode_scene(&fm).unwrap(), scene);
        assert_eq!(out.render_clean(scene), *fm);
        assert_eq!(fm.locations(), GRID_SIDE * GRID_SIDE);
    }
}

#[test]
fn synthetic_vocabulary_and_captions() {
    let out = synth_generate(&small(1, 0.05)).unwrap();
    assert!(out.vocab.len() >= 300);
    assert_eq!(out.dataset.meta.grid, Some([GRID_SIDE, GRID_SIDE]));
    for (rec, scene) in out.dataset.records.iter().zip(&out.scenes) {
        assert_eq!(out.vocab.render(&rec.captions[0]), scene.caption());
        assert!(rec.captions[0].len() <= MAX_CAPTION_WORDS);
        assert!(!rec.captions[0].contains(&out.vocab.unk_id()));
    }
}

#[test]
fn scene_words_point_at_cells() {
    let scene = SyntheticScene::new(vec![
        SceneObject { shape: Shape::Circle, color: Color::Red, cell: 5 },
        SceneObject { shape: Shape::Square, color: Color::Red, cell: 2 },
    ])
    .unwrap();
    let mut cells = scene.cells_for_word("red");
    cells.sort();
    assert_eq!(cells, [2, 5]);
    assert_eq!(scene.cells_for_word("circle"), [5]);
    assert!(scene.cells_for_word("and").is_empty());
}

#[test]
fn dataset_roundtrips_through_disk() {
    let out = synth_generate(&small(2, 0.05)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&out.dataset, &out.vocab, dir.path()).unwrap();
    let mut back = load_dataset(&dir.path().join(DATASET_FILE), &out.vocab, MAX_CAPTION_WORDS).unwrap();
    back.preload().unwrap();
    assert_eq!(back.len(), out.dataset.len());
    assert_eq!(back.meta, out.dataset.meta);
    for (a, b) in back.records.iter().zip(&out.dataset.records) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.features, b.features);
    }
}

#[test]
fn split_tail_keeps_order() {
    let out = synth_generate(&small(2, 0.05)).unwrap();
    let ids: Vec<String> = out.dataset.records.iter().map(|r| r.id.clone()).collect();
    let (train, test) = out.dataset.split_tail(10);
    assert_eq!(train.len(), 50);
    assert_eq!(test.records[0].id, ids[50]);
}

proptest! {
    #[test]
    fn vocab_ignores_corpus_order(words in proptest::collection::vec("[a-e]{1,2}", 1..40), seed in any::<u64>()) {
        let caps: Vec<Vec<String>> = words.chunks(3).map(|c| c.to_vec()).collect();
        let mut shuffled = caps.clone();
        // deterministic permutation by rotation and reversal
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        for min_freq in [1, 2] {
            prop_assert_eq!(build_vocab(&caps, min_freq).unwrap(), build_vocab(&shuffled, min_freq).unwrap());
        }
    }

    #[test]
    fn tokenize_is_idempotent(text in "[A-Za-z ,.'!]{0,40}") {
        let once = tokenize(&text);
        let again = tokenize(&once.join(" "));
        prop_assert_eq!(once, again);
    }
}
