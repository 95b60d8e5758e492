//! Stimulus schema, counterbalancing, validation and probe/test splitting.
//!
//! A task file encodes each pair once as a template plus label bindings;
//! both counterbalance variants are materialized at load. Loading is
//! all-or-nothing: every target and distractor must encode to exactly one
//! token or the whole load fails.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::BpeVocab;

/// Counterbalance variant tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

impl Variant {
    pub fn flipped(self) -> Variant {
        match self {
            Variant::A => Variant::B,
            Variant::B => Variant::A,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Variant::A => 'A',
            Variant::B => 'B',
        }
    }
}

/// One prompt with its single-token target and distractor. Target and
/// distractor strings are exact, leading whitespace included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusItem {
    pub pair_id: usize,
    pub prompt: String,
    pub target: String,
    pub distractor: String,
    pub condition: String,
    pub variant: Variant,
}

/// A validated task: name plus materialized items in (pair, variant) order.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub counterbalanced: bool,
    pub items: Vec<StimulusItem>,
}

impl TaskSpec {
    pub fn n_pairs(&self) -> usize {
        self.items.iter().map(|i| i.pair_id + 1).max().unwrap_or(0)
    }

    /// The mirrored variant of `item`: same pair, flipped variant tag,
    /// label-to-category assignment and target/distractor swapped by
    /// construction of the task file.
    pub fn mirror_of(&self, item: &StimulusItem) -> Result<&StimulusItem> {
        if !self.counterbalanced {
            return Err(Error::Pairing(format!(
                "task \"{}\" is not counterbalanced",
                self.name
            )));
        }
        self.items
            .iter()
            .find(|c| c.pair_id == item.pair_id && c.variant == item.variant.flipped())
            .ok_or_else(|| {
                Error::Pairing(format!(
                    "pair {} has no variant {:?}",
                    item.pair_id,
                    item.variant.flipped()
                ))
            })
    }
}

/// Disjoint probe/test halves; variants of a pair always travel together.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub probe: Vec<StimulusItem>,
    pub test: Vec<StimulusItem>,
    pub seed: Option<u64>,
}

// --- file schema ------------------------------------------------------------

#[derive(Deserialize)]
struct TaskFile {
    name: String,
    counterbalanced: bool,
    pairs: Vec<PairDef>,
}

#[derive(Deserialize)]
struct PairDef {
    template: String,
    variants: Vec<VariantDef>,
}

#[derive(Deserialize)]
struct VariantDef {
    #[serde(default)]
    prompt_bindings: BTreeMap<String, String>,
    target: String,
    distractor: String,
    condition: String,
}

/// Substitute `{KEY}` placeholders verbatim; no whitespace normalization.
fn render_template(template: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut used: Vec<&str> = Vec::new();
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let Some(end) = after.find('}') else {
            return Err(Error::Pairing(format!(
                "unterminated placeholder in template {template:?}"
            )));
        };
        let key = &after[..end];
        let Some(value) = bindings.get(key) else {
            return Err(Error::Pairing(format!(
                "template references {{{key}}} but bindings provide {:?}",
                bindings.keys().collect::<Vec<_>>()
            )));
        };
        used.push(key);
        out.push_str(value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    for key in bindings.keys() {
        if !used.contains(&key.as_str()) {
            return Err(Error::Pairing(format!(
                "binding {key:?} unused by template {template:?}"
            )));
        }
    }
    Ok(out)
}

fn validate_item(item: &StimulusItem, vocab: &BpeVocab) -> Result<()> {
    let fail = |e: Error| Error::Item {
        pair_id: item.pair_id,
        variant: item.variant.as_char(),
        source: Box::new(e),
    };
    if item.prompt.is_empty() {
        return Err(fail(Error::Param("empty prompt".to_string())));
    }
    if item.target == item.distractor {
        return Err(fail(Error::Param(format!(
            "target and distractor are both {:?}",
            item.target
        ))));
    }
    vocab.single_token_id(&item.target).map_err(fail)?;
    vocab.single_token_id(&item.distractor).map_err(fail)?;
    Ok(())
}

/// Parse and fully validate a task file against `vocab`.
pub fn load_task(path: &Path, vocab: &BpeVocab) -> Result<TaskSpec> {
    let text = std::fs::read_to_string(path)?;
    let file: TaskFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;

    let schema_err = |message: String| Error::Schema {
        path: path.display().to_string(),
        message,
    };

    let mut items = Vec::new();
    for (pair_id, pair) in file.pairs.iter().enumerate() {
        let expected = if file.counterbalanced { 2 } else { 1 };
        if pair.variants.len() != expected {
            return Err(schema_err(format!(
                "pair {pair_id}: expected {expected} variant(s), got {}",
                pair.variants.len()
            )));
        }
        for (vi, variant) in pair.variants.iter().enumerate() {
            let prompt = render_template(&pair.template, &variant.prompt_bindings)
                .map_err(|e| schema_err(format!("pair {pair_id}: {e}")))?;
            let item = StimulusItem {
                pair_id,
                prompt,
                target: variant.target.clone(),
                distractor: variant.distractor.clone(),
                condition: variant.condition.clone(),
                variant: if vi == 0 { Variant::A } else { Variant::B },
            };
            validate_item(&item, vocab)?;
            items.push(item);
        }
    }
    if items.is_empty() {
        return Err(schema_err("task has no pairs".to_string()));
    }
    Ok(TaskSpec {
        name: file.name,
        counterbalanced: file.counterbalanced,
        items,
    })
}

/// Split pairs into probe/test halves.
///
/// With no seed the split is by pair-id parity (even → probe), so runs are
/// reproducible without configuration. With a seed the pair ids are
/// shuffled and the first ⌈n/2⌉ go to probe. Halves differ by at most one
/// pair; variants of one pair never separate.
pub fn split_probe_test(task: &TaskSpec, seed: Option<u64>) -> Result<TaskSplit> {
    let n_pairs = task.n_pairs();
    if n_pairs < 2 {
        return Err(Error::Split(format!(
            "task \"{}\" has {n_pairs} pair(s); need at least 2",
            task.name
        )));
    }
    let probe_pairs: Vec<usize> = match seed {
        None => (0..n_pairs).filter(|p| p % 2 == 0).collect(),
        Some(s) => {
            let mut ids: Vec<usize> = (0..n_pairs).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            ids.shuffle(&mut rng);
            let take = n_pairs.div_ceil(2);
            let mut probe: Vec<usize> = ids.into_iter().take(take).collect();
            probe.sort_unstable();
            probe
        }
    };
    let in_probe = |p: usize| probe_pairs.binary_search(&p).is_ok();
    let mut probe = Vec::new();
    let mut test = Vec::new();
    for item in &task.items {
        if in_probe(item.pair_id) {
            probe.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok(TaskSplit { probe, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn vocab() -> (tempfile::TempDir, BpeVocab) {
        let dir = tempfile::tempdir().unwrap();
        let v = fixtures::fixture_vocab(dir.path()).unwrap();
        (dir, v)
    }

    fn fixture_task(name: &str, vocab: &BpeVocab) -> TaskSpec {
        let path =
            std::path::PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/tasks/"))
                .join(name);
        load_task(&path, vocab).unwrap()
    }

    #[test]
    fn implicit_causality_fixture_loads() {
        let (_d, v) = vocab();
        let task = fixture_task("implicit_causality.json", &v);
        assert_eq!(task.n_pairs(), 2);
        assert_eq!(task.items.len(), 4);
        let first = &task.items[0];
        assert_eq!(first.prompt, "Gary scared Anna because");
        assert_eq!(first.target, " he");
        assert_eq!(first.distractor, " she");
    }

    #[test]
    fn sound_gender_fixture_loads() {
        let (_d, v) = vocab();
        let task = fixture_task("sound_gender.json", &v);
        assert_eq!(task.items[0].prompt, "Although Pelcrad was sick,");
        assert_eq!(task.items[1].prompt, "Although Pelcra was sick,");
    }

    #[test]
    fn multi_token_target_rejected_at_load() {
        let (_d, v) = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            serde_json::json!({
                "name": "bad",
                "counterbalanced": false,
                "pairs": [{
                    "template": "the word is",
                    "variants": [{
                        "prompt_bindings": {},
                        "target": "spiky",
                        "distractor": " A",
                        "condition": "x"
                    }]
                }]
            })
            .to_string(),
        )
        .unwrap();
        match load_task(&path, &v) {
            Err(Error::Item {
                pair_id, source, ..
            }) => {
                assert_eq!(pair_id, 0);
                assert!(matches!(*source, Error::MultiTokenTarget { .. }));
            }
            other => panic!("expected item error, got {other:?}"),
        }
    }

    #[test]
    fn mirror_is_an_involution_and_swaps_labels() {
        let (_d, v) = vocab();
        let task = fixture_task("sound_shape.json", &v);
        for item in &task.items {
            let m = task.mirror_of(item).unwrap();
            assert_eq!(m.pair_id, item.pair_id);
            assert_eq!(m.variant, item.variant.flipped());
            assert_eq!(m.target, item.distractor);
            assert_eq!(m.distractor, item.target);
            let back = task.mirror_of(m).unwrap();
            assert_eq!(back, item);
        }
        // Variant A with target " A" mirrors to variant B with target " B".
        let a = &task.items[0];
        assert_eq!(a.variant, Variant::A);
        assert_eq!(a.target, " A");
        let b = task.mirror_of(a).unwrap();
        assert_eq!(b.variant, Variant::B);
        assert_eq!(b.target, " B");
    }

    #[test]
    fn mirror_requires_counterbalancing() {
        let (_d, v) = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.json");
        std::fs::write(
            &path,
            serde_json::json!({
                "name": "plain",
                "counterbalanced": false,
                "pairs": [
                    {"template": "he said that", "variants": [
                        {"prompt_bindings": {}, "target": " he", "distractor": " she", "condition": "x"}
                    ]},
                    {"template": "she said that", "variants": [
                        {"prompt_bindings": {}, "target": " she", "distractor": " he", "condition": "x"}
                    ]}
                ]
            })
            .to_string(),
        )
        .unwrap();
        let task = load_task(&path, &v).unwrap();
        assert!(matches!(
            task.mirror_of(&task.items[0]),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn mirror_preserves_prompt_token_length_on_fixtures() {
        let (_d, v) = vocab();
        for name in [
            "implicit_causality.json",
            "sound_gender.json",
            "sound_shape.json",
        ] {
            let task = fixture_task(name, &v);
            for item in &task.items {
                let m = task.mirror_of(item).unwrap();
                assert_eq!(
                    v.encode(&item.prompt).len(),
                    v.encode(&m.prompt).len(),
                    "{name} pair {}",
                    item.pair_id
                );
            }
        }
    }

    #[test]
    fn parity_split_four_pairs() {
        let (_d, v) = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("four.json");
        let pairs: Vec<serde_json::Value> = (0..4)
            .map(|i| {
                serde_json::json!({
                    "template": format!("prompt number {i} says"),
                    "variants": [{
                        "prompt_bindings": {},
                        "target": " he",
                        "distractor": " she",
                        "condition": "x"
                    }]
                })
            })
            .collect();
        std::fs::write(
            &path,
            serde_json::json!({"name": "four", "counterbalanced": false, "pairs": pairs})
                .to_string(),
        )
        .unwrap();
        let task = load_task(&path, &v).unwrap();
        let split = split_probe_test(&task, None).unwrap();
        let probe_ids: Vec<usize> = split.probe.iter().map(|i| i.pair_id).collect();
        let test_ids: Vec<usize> = split.test.iter().map(|i| i.pair_id).collect();
        assert_eq!(probe_ids, vec![0, 2]);
        assert_eq!(test_ids, vec![1, 3]);
    }

    #[test]
    fn split_is_a_partition_for_any_seed() {
        let (_d, v) = vocab();
        let task = fixture_task("sound_shape.json", &v);
        for seed in [None, Some(0), Some(1), Some(99)] {
            let split = split_probe_test(&task, seed).unwrap();
            assert_eq!(split.probe.len() + split.test.len(), task.items.len());
            for p in &split.probe {
                assert!(!split.test.contains(p));
            }
            // Variants travel together.
            for part in [&split.probe, &split.test] {
                for item in part.iter() {
                    assert!(
                        part.iter()
                            .any(|c| c.pair_id == item.pair_id && c.variant != item.variant),
                        "pair {} split apart (seed {seed:?})",
                        item.pair_id
                    );
                }
            }
            let diff = (split.probe.len() as i64 - split.test.len() as i64).abs();
            assert!(diff <= 2); // at most one pair of two variants
        }
    }

    #[test]
    fn thirty_two_pairs_split_sixteen_sixteen() {
        // Matches the degrees of freedom of per-pair pooled statistics:
        // 32 pairs -> 16 test values -> df 15 per half... df 31 overall.
        let (_d, v) = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.json");
        let pairs: Vec<serde_json::Value> = (0..32)
            .map(|i| {
                serde_json::json!({
                    "template": format!("speaker {i} said that"),
                    "variants": [
                        {"prompt_bindings": {}, "target": " he", "distractor": " she", "condition": "x"},
                        {"prompt_bindings": {}, "target": " she", "distractor": " he", "condition": "x"}
                    ]
                })
            })
            .collect();
        std::fs::write(
            &path,
            serde_json::json!({"name": "big", "counterbalanced": true, "pairs": pairs}).to_string(),
        )
        .unwrap();
        let task = load_task(&path, &v).unwrap();
        for seed in [None, Some(17)] {
            let split = split_probe_test(&task, seed).unwrap();
            let count_pairs = |items: &[StimulusItem]| {
                items
                    .iter()
                    .map(|i| i.pair_id)
                    .collect::<std::collections::BTreeSet<_>>()
                    .len()
            };
            assert_eq!(count_pairs(&split.probe), 16);
            assert_eq!(count_pairs(&split.test), 16);
        }
    }

    #[test]
    fn split_needs_two_pairs() {
        let (_d, v) = vocab();
        let task = fixture_task("sound_gender.json", &v);
        assert!(matches!(
            split_probe_test(&task, None),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn template_binding_errors() {
        let mut bindings = BTreeMap::new();
        bindings.insert("L1".to_string(), "Gary".to_string());
        assert_eq!(
            render_template("{L1} left", &bindings).unwrap(),
            "Gary left"
        );
        assert!(render_template("{L2} left", &bindings).is_err());
        assert!(render_template("no placeholder", &bindings).is_err());
        bindings.clear();
        assert_eq!(
            render_template("no placeholder", &bindings).unwrap(),
            "no placeholder"
        );
    }
}
