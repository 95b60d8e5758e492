//! End-to-end experiment orchestration: split stimuli, attribute on the
//! probe half, select top-k neurons, intervene, evaluate on the held-out
//! half, attach statistics and random-neuron baselines.
//!
//! Items inside a condition are evaluated in parallel; all reductions run
//! in fixed item order, so reports are reproducible for any thread count.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{accumulate_effects, top_k, LnMode, SelectionSpec};
use crate::error::{Error, Result};
use crate::model::{
    forward, logit_diff, InterventionSpec, ModelConfig, ModelWeights, NeuronRef, PositionScope,
};
use crate::stats::{one_sample_t, ConditionDesc, EvalResult, Subset, TTestResult};
use crate::tasks::{load_task, split_probe_test, StimulusItem, Variant};
use crate::tokenizer::{BpeVocab, TokenId};

/// How probe/test halves are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRule {
    /// Even pair ids probe, odd pair ids test (the reproducible default).
    Parity,
    /// Seeded uniform shuffle of pair ids, first half probe.
    Seeded(u64),
}

/// How the two counterbalance variants of a pair combine into one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingRule {
    /// Mean of the variants' logit differences (default).
    PooledMean,
    /// Variant A only.
    VariantA,
}

/// Random-baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub reps: usize,
    pub seed: u64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { reps: 20, seed: 0 }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub task_path: PathBuf,
    pub split: SplitRule,
    pub ln_mode: LnMode,
    pub k_values: Vec<usize>,
    pub run_interventions: bool,
    pub scale_factor: f32,
    pub baseline: BaselineSpec,
    pub positions: PositionScope,
    pub pooling: PoolingRule,
}

impl ExperimentPlan {
    pub fn new(task_path: impl Into<PathBuf>) -> Self {
        Self {
            task_path: task_path.into(),
            split: SplitRule::Parity,
            ln_mode: LnMode::Frozen,
            k_values: vec![5, 50],
            run_interventions: true,
            scale_factor: 2.0,
            baseline: BaselineSpec::default(),
            positions: PositionScope::All,
            pooling: PoolingRule::PooledMean,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for &k in &self.k_values {
            if k == 0 || k > cfg.total_neurons() {
                return Err(Error::Param(format!(
                    "k = {k} out of range 1..={}",
                    cfg.total_neurons()
                )));
            }
        }
        if self.run_interventions && self.baseline.reps == 0 {
            return Err(Error::Param("baseline reps must be >= 1".to_string()));
        }
        if !self.scale_factor.is_finite() {
            return Err(Error::Param("scale factor must be finite".to_string()));
        }
        Ok(())
    }
}

/// One measured item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub pair_id: usize,
    pub variant: Variant,
    pub logit_diff: f64,
}

/// Measurements plus statistics for one (subset, intervention) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub subset: Subset,
    pub intervention: String,
    /// True when the intervention was selected on these same items.
    pub in_sample: bool,
    pub per_item: Vec<ItemOutcome>,
    pub pooled: Vec<f64>,
    pub stats: TTestResult,
}

/// One random-baseline repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepReport {
    pub rep: usize,
    pub neurons: Vec<NeuronRef>,
    pub per_item: Vec<ItemOutcome>,
    pub pooled: Vec<f64>,
    pub stats: TTestResult,
}

/// All repetitions of one random-baseline condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomBaselineReport {
    pub k: usize,
    pub mode: String,
    pub subset: Subset,
    pub reps: Vec<RepReport>,
    /// Mean of the per-repetition means.
    pub mean_across_reps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub k: usize,
    pub neurons: Vec<NeuronRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub task: String,
    pub n_items: usize,
    pub mode: LnMode,
    pub csv_path: Option<String>,
}

/// Everything a run produced. Identical inputs and seeds give identical
/// reports except for `wall_clock_secs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub task: String,
    pub plan: ExperimentPlan,
    pub n_pairs_probe: usize,
    pub n_pairs_test: usize,
    pub ledger: LedgerSummary,
    pub selections: Vec<SelectionReport>,
    pub conditions: Vec<ConditionReport>,
    pub random_baselines: Vec<RandomBaselineReport>,
    pub wall_clock_secs: f64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

// --- evaluation -------------------------------------------------------------

struct PreparedItem {
    pair_id: usize,
    variant: Variant,
    tokens: Vec<TokenId>,
    target: TokenId,
    distractor: TokenId,
}

fn prepare_items(vocab: &BpeVocab, items: &[StimulusItem]) -> Result<Vec<PreparedItem>> {
    items
        .iter()
        .map(|item| {
            let wrap = |e: Error| Error::Item {
                pair_id: item.pair_id,
                variant: item.variant.as_char(),
                source: Box::new(e),
            };
            Ok(PreparedItem {
                pair_id: item.pair_id,
                variant: item.variant,
                tokens: vocab.encode(&item.prompt),
                target: vocab.single_token_id(&item.target).map_err(wrap)?,
                distractor: vocab.single_token_id(&item.distractor).map_err(wrap)?,
            })
        })
        .collect()
}

fn pool_outcomes(outcomes: &[ItemOutcome], rule: PoolingRule) -> Vec<f64> {
    let mut pair_ids: Vec<usize> = outcomes.iter().map(|o| o.pair_id).collect();
    pair_ids.sort_unstable();
    pair_ids.dedup();
    pair_ids
        .into_iter()
        .filter_map(|pid| {
            let members: Vec<&ItemOutcome> = outcomes.iter().filter(|o| o.pair_id == pid).collect();
            match rule {
                PoolingRule::PooledMean => {
                    let sum: f64 = members.iter().map(|o| o.logit_diff).sum();
                    Some(sum / members.len() as f64)
                }
                PoolingRule::VariantA => members
                    .iter()
                    .find(|o| o.variant == Variant::A)
                    .map(|o| o.logit_diff),
            }
        })
        .collect()
}

fn evaluate_prepared(
    w: &ModelWeights,
    cfg: &ModelConfig,
    items: &[PreparedItem],
    iv: &InterventionSpec,
    pooling: PoolingRule,
) -> Result<(Vec<ItemOutcome>, Vec<f64>)> {
    let per_item: Result<Vec<ItemOutcome>> = items
        .par_iter()
        .map(|item| {
            let trace = forward(w, cfg, &item.tokens, iv)?;
            Ok(ItemOutcome {
                pair_id: item.pair_id,
                variant: item.variant,
                logit_diff: logit_diff(&trace, item.target, item.distractor)?,
            })
        })
        .collect();
    let per_item = per_item?;
    let pooled = pool_outcomes(&per_item, pooling);
    Ok((per_item, pooled))
}

/// Evaluate a stimulus list under one intervention; returns per-item rows
/// and the pooled values used for statistics.
pub fn evaluate_items(
    w: &ModelWeights,
    cfg: &ModelConfig,
    vocab: &BpeVocab,
    items: &[StimulusItem],
    iv: &InterventionSpec,
    pooling: PoolingRule,
) -> Result<(Vec<ItemOutcome>, Vec<f64>)> {
    let prepared = prepare_items(vocab, items)?;
    evaluate_prepared(w, cfg, &prepared, iv, pooling)
}

#[allow(clippy::too_many_arguments)]
fn condition_report(
    w: &ModelWeights,
    cfg: &ModelConfig,
    items: &[PreparedItem],
    iv: &InterventionSpec,
    name: &str,
    subset: Subset,
    in_sample: bool,
    pooling: PoolingRule,
) -> Result<ConditionReport> {
    let (per_item, pooled) = evaluate_prepared(w, cfg, items, iv, pooling)?;
    let stats = one_sample_t(&pooled, 0.0)?;
    Ok(ConditionReport {
        name: name.to_string(),
        subset,
        intervention: iv.mode_label(),
        in_sample,
        per_item,
        pooled,
        stats,
    })
}

/// A sampled neuron set plus the measurements it produced.
pub struct BaselineRep {
    pub neurons: Vec<NeuronRef>,
    pub per_item: Vec<ItemOutcome>,
    pub eval: EvalResult,
}

/// Repeated random-neuron interventions on the test half.
///
/// Draws `reps` uniform samples of `k` neurons without replacement from the
/// pool of all neurons minus `exclude` (the selected top-k set), evaluating
/// each; deterministic given `seed`.
#[allow(clippy::too_many_arguments)]
pub fn random_neuron_baseline(
    w: &ModelWeights,
    cfg: &ModelConfig,
    vocab: &BpeVocab,
    test_items: &[StimulusItem],
    k: usize,
    reps: usize,
    seed: u64,
    factor: f32,
    positions: PositionScope,
    exclude: &[NeuronRef],
    pooling: PoolingRule,
    task_name: &str,
) -> Result<Vec<BaselineRep>> {
    let pool: Vec<NeuronRef> = (0..cfg.n_layer)
        .flat_map(|l| (0..cfg.d_mlp).map(move |n| NeuronRef::new(l, n)))
        .filter(|n| !exclude.contains(n))
        .collect();
    if k > pool.len() {
        return Err(Error::Param(format!(
            "k = {k} exceeds candidate pool of {}",
            pool.len()
        )));
    }
    let prepared = prepare_items(vocab, test_items)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let picked: Vec<NeuronRef> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .iter()
            .map(|i| pool[i])
            .collect();
        let iv = InterventionSpec::scale(factor, picked.iter().copied(), positions)?;
        let (per_item, pooled) = evaluate_prepared(w, cfg, &prepared, &iv, pooling)?;
        out.push(BaselineRep {
            neurons: picked,
            per_item,
            eval: EvalResult {
                values: pooled,
                condition: ConditionDesc {
                    task: task_name.to_string(),
                    subset: Subset::Testing,
                    intervention: iv.mode_label(),
                },
            },
        });
    }
    Ok(out)
}

// --- the full protocol ------------------------------------------------------

/// Run probe → attribute → select → intervene → evaluate → report.
///
/// When `persist_dir` is given, the ledger CSV/sidecar and per-k selection
/// files are written there as the run progresses.
pub fn run_experiment(
    w: &ModelWeights,
    cfg: &ModelConfig,
    vocab: &BpeVocab,
    plan: &ExperimentPlan,
    persist_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    let started = std::time::Instant::now();
    plan.validate(cfg)?;

    let task = load_task(&plan.task_path, vocab).map_err(|e| e.in_stage("task-load"))?;
    let split_seed = match plan.split {
        SplitRule::Parity => None,
        SplitRule::Seeded(s) => Some(s),
    };
    let split = split_probe_test(&task, split_seed).map_err(|e| e.in_stage("split"))?;

    let ledger = accumulate_effects(w, cfg, vocab, &task.name, &split.probe, plan.ln_mode)
        .map_err(|e| e.in_stage("ledger"))?;
    let mut ledger_csv_path = None;
    if let Some(dir) = persist_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_stage("persist"))?;
        ledger
            .write_csv(&dir.join("ledger.csv"))
            .map_err(|e| e.in_stage("persist"))?;
        ledger
            .write_sidecar(&dir.join("ledger.json"))
            .map_err(|e| e.in_stage("persist"))?;
        // Relative to the report's own directory, so identical runs into
        // different directories produce identical reports.
        ledger_csv_path = Some("ledger.csv".to_string());
    }

    let mut selections = Vec::new();
    for &k in &plan.k_values {
        let neurons = top_k(&ledger, SelectionSpec { k }).map_err(|e| e.in_stage("selection"))?;
        if let Some(dir) = persist_dir {
            let body = serde_json::json!({"k": k, "neurons": neurons});
            std::fs::write(
                dir.join(format!("selection_k{k}.json")),
                serde_json::to_string_pretty(&body)? + "\n",
            )
            .map_err(|e| Error::from(e).in_stage("persist"))?;
        }
        selections.push(SelectionReport { k, neurons });
    }

    let probe_prepared = prepare_items(vocab, &split.probe).map_err(|e| e.in_stage("evaluate"))?;
    let test_prepared = prepare_items(vocab, &split.test).map_err(|e| e.in_stage("evaluate"))?;

    let mut conditions = Vec::new();
    let no_iv = InterventionSpec::none();
    for (subset, prepared) in [
        (Subset::Probing, &probe_prepared),
        (Subset::Testing, &test_prepared),
    ] {
        conditions.push(
            condition_report(
                w,
                cfg,
                prepared,
                &no_iv,
                "original",
                subset,
                false,
                plan.pooling,
            )
            .map_err(|e| e.in_stage("evaluate"))?,
        );
    }

    let mut random_baselines = Vec::new();
    if plan.run_interventions {
        for sel in &selections {
            let k = sel.k;
            let ablate = InterventionSpec::ablate(sel.neurons.iter().copied(), plan.positions);
            let scale = InterventionSpec::scale(
                plan.scale_factor,
                sel.neurons.iter().copied(),
                plan.positions,
            )?;
            for (label, iv) in [
                (format!("ablate-top{k}"), &ablate),
                (format!("scale-{}-top{k}", plan.scale_factor), &scale),
            ] {
                // The selection was made on the probe half, so probing-set
                // intervention results are in-sample; both are reported.
                for (subset, prepared, in_sample) in [
                    (Subset::Probing, &probe_prepared, true),
                    (Subset::Testing, &test_prepared, false),
                ] {
                    conditions.push(
                        condition_report(
                            w,
                            cfg,
                            prepared,
                            iv,
                            &label,
                            subset,
                            in_sample,
                            plan.pooling,
                        )
                        .map_err(|e| e.in_stage("evaluate"))?,
                    );
                }
            }

            for (mode_label, factor) in [
                ("ablate".to_string(), 0.0),
                ("scale".to_string(), plan.scale_factor),
            ] {
                let reps = random_neuron_baseline(
                    w,
                    cfg,
                    vocab,
                    &split.test,
                    k,
                    plan.baseline.reps,
                    plan.baseline.seed,
                    factor,
                    plan.positions,
                    &sel.neurons,
                    plan.pooling,
                    &task.name,
                )
                .map_err(|e| e.in_stage("random-baseline"))?;
                let mut rep_reports = Vec::with_capacity(reps.len());
                let mut mean_sum = 0.0f64;
                for (rep, baseline) in reps.into_iter().enumerate() {
                    let stats = one_sample_t(&baseline.eval.values, 0.0)
                        .map_err(|e| e.in_stage("random-baseline"))?;
                    mean_sum += stats.mean;
                    rep_reports.push(RepReport {
                        rep,
                        neurons: baseline.neurons,
                        per_item: baseline.per_item,
                        pooled: baseline.eval.values,
                        stats,
                    });
                }
                random_baselines.push(RandomBaselineReport {
                    k,
                    mode: mode_label,
                    subset: Subset::Testing,
                    mean_across_reps: mean_sum / rep_reports.len() as f64,
                    reps: rep_reports,
                });
            }
        }
    }

    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        task: task.name.clone(),
        plan: plan.clone(),
        n_pairs_probe: split
            .probe
            .iter()
            .map(|i| i.pair_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        n_pairs_test: split
            .test
            .iter()
            .map(|i| i.pair_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        ledger: LedgerSummary {
            task: ledger.task.clone(),
            n_items: ledger.n_items,
            mode: ledger.mode,
            csv_path: ledger_csv_path,
        },
        selections,
        conditions,
        random_baselines,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
