use comic_core::accountant::{count, format_suite, reference_suite, ModelSpec, OutputVocab};
use comic_core::attention::Projection;
use comic_core::decoder::{count_decoder_params, Model};
use comic_core::radix::{RadixConfig, TokenCodec};
use proptest::prelude::*;

fn codec_for(vocab: OutputVocab) -> TokenCodec {
    match vocab {
        OutputVocab::Radix { base } => TokenCodec::Radix(RadixConfig::new(base, 2).unwrap()),
        other => TokenCodec::Word {
            vocab_size: other.encoded_size() - 2,
        },
    }
}

fn allocated(spec: &ModelSpec) -> usize {
    let m = Model::<f32>::zeros(spec.decoder_config(), codec_for(spec.vocab)).unwrap();
    m.num_params()
}

#[test]
fn word_baseline_allocation_matches() {
    let spec = ModelSpec::standard(OutputVocab::Words {
        count: 9962,
        specials_included: false,
    });
    let c = count(&spec).unwrap();
    assert_eq!(allocated(&spec), c.total);
    assert!((c.total as f64 / 12.2e6 - 1.0).abs() < 0.02);
    assert!((c.embeddings as f64 / 7.7e6 - 1.0).abs() < 0.02);
}

#[test]
fn suite_rows_all_pass() {
    let rows = reference_suite();
    let failing: Vec<_> = rows.iter().filter(|r| !r.passes()).collect();
    assert!(failing.is_empty(), "{failing:?}");
    let text = format_suite(&rows);
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn comic_models_are_smaller() {
    let word = count(&ModelSpec::standard(OutputVocab::Words {
        count: 9962,
        specials_included: false,
    }))
    .unwrap();
    let comic = count(&ModelSpec {
        projection: Projection::Tied,
        heads: 8,
        ..ModelSpec::standard(OutputVocab::Radix { base: 256 })
    })
    .unwrap();
    assert!(word.total as f64 / comic.total as f64 > 3.0);
    assert!(word.embeddings > 20 * comic.embeddings);
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        prop_oneof![
            (4usize..40).prop_map(|base| OutputVocab::Radix { base }),
            (1usize..60).prop_map(|count| OutputVocab::Words {
                count,
                specials_included: false
            }),
        ],
        1usize..12,
        prop_oneof![Just(1usize), Just(2), Just(4)],
        1usize..5,
        1usize..6,
        0usize..3,
        any::<bool>(),
    )
        .prop_map(|(vocab, m, g, per_head, r, mode, tie)| {
            let k = g * per_head;
            let n = 2 * g;
            let r = g * r;
            ModelSpec {
                vocab,
                word_size: m,
                state_size: n,
                mlp_size: k,
                projection: match mode {
                    0 => Projection::None,
                    1 => Projection::Untied { q: g * 3 },
                    _ => Projection::Tied,
                },
                heads: g,
                feature_channels: r,
                image_embed_size: r,
                tie_embeddings: tie,
            }
        })
}

proptest! {
    #[test]
    fn closed_form_equals_allocation(spec in spec_strategy()) {
        let c = count(&spec).unwrap();
        prop_assert_eq!(allocated(&spec), c.total);
        let b = count_decoder_params(&spec.decoder_config()).unwrap();
        prop_assert_eq!(
            (b.embeddings, b.recurrent, b.attention, b.init, b.norms, b.total),
            (c.embeddings, c.recurrent, c.attention, c.init, c.norms, c.total)
        );
    }

    #[test]
    fn head_count_is_free(spec in spec_strategy()) {
        // Same k, r, n; only the head split changes.
        let one = ModelSpec { heads: 1, ..spec };
        prop_assert_eq!(count(&one).unwrap().total, count(&spec).unwrap().total);
    }
}
