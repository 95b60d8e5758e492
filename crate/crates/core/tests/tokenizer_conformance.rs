//! Tokenizer conformance: golden ids from the reference implementation,
//! round-trip and determinism properties, and single-token validation at
//! task load.

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use serde::Deserialize;

use neuroprobe::error::Error;
use neuroprobe::tasks::load_task;
use neuroprobe::tokenizer::{load_vocab, BpeVocab};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn vocab() -> &'static BpeVocab {
    static VOCAB: std::sync::OnceLock<BpeVocab> = std::sync::OnceLock::new();
    VOCAB.get_or_init(|| {
        load_vocab(&fixture("vocab.json"), &fixture("merges.txt")).expect("fixture vocab loads")
    })
}

#[derive(Deserialize)]
struct GoldenCase {
    text: String,
    ids: Vec<u32>,
}

#[test]
fn golden_fixture_matches_reference_ids() {
    let vocab = vocab();
    let cases: Vec<GoldenCase> =
        serde_json::from_str(&std::fs::read_to_string(fixture("bpe_golden.json")).unwrap())
            .unwrap();
    assert_eq!(cases.len(), 50);
    for case in &cases {
        let got: Vec<u32> = vocab.encode(&case.text).iter().map(|t| t.0).collect();
        assert_eq!(got, case.ids, "text {:?}", case.text);
        let back = vocab
            .decode(
                &got.iter()
                    .map(|&i| neuroprobe::TokenId(i))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        assert_eq!(back, case.text);
    }
}

#[test]
fn multi_token_target_rejected_at_task_load() {
    let vocab = vocab();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "name": "sound-shape-invalid",
            "counterbalanced": false,
            "pairs": [{
                "template": "the word for the pointed shape is",
                "variants": [{
                    "prompt_bindings": {},
                    "target": "spiky",
                    "distractor": " A",
                    "condition": "invalid"
                }]
            }]
        })
        .to_string(),
    )
    .unwrap();
    match load_task(&path, vocab) {
        Err(Error::Item { source, .. }) => {
            assert!(matches!(*source, Error::MultiTokenTarget { .. }))
        }
        other => panic!("expected MultiTokenTarget, got {other:?}"),
    }
}

/// Against the published 50257-token vocabulary, when available. Point
/// NEUROPROBE_GPT2_VOCAB and NEUROPROBE_GPT2_MERGES at the files to run.
#[test]
#[ignore = "needs the published vocab.json/merges.txt; see README"]
fn published_vocab_loads_with_expected_size() {
    let vocab_path = std::env::var("NEUROPROBE_GPT2_VOCAB").expect("NEUROPROBE_GPT2_VOCAB");
    let merges_path = std::env::var("NEUROPROBE_GPT2_MERGES").expect("NEUROPROBE_GPT2_MERGES");
    let vocab = load_vocab(Path::new(&vocab_path), Path::new(&merges_path)).unwrap();
    assert_eq!(vocab.n_vocab(), 50257);
    assert!(vocab.single_token_id(" A").is_ok());
    assert!(matches!(
        vocab.single_token_id("spiky"),
        Err(Error::MultiTokenTarget { .. })
    ));
    for s in ["Gary scared Anna because he was violent.", "bouba & kiki"] {
        assert_eq!(vocab.decode(&vocab.encode(s)).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn round_trip_arbitrary_utf8(s in any::<String>()) {
        let vocab = vocab();
        let ids = vocab.encode(&s);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), s);
    }

    #[test]
    fn encoding_is_deterministic(s in ".{0,60}") {
        let vocab = vocab();
        prop_assert_eq!(vocab.encode(&s), vocab.encode(&s));
    }
}
