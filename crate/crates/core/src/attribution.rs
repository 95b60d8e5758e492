//! Per-neuron direct effects on the target-vs-distractor direction.
//!
//! A neuron's direct effect is its activation times the projection of its
//! write vector onto the direction of interest, measured in the final
//! residual stream at the prediction position. Accumulating over probe
//! items (f64, fixed item order) gives the ledger that top-k selection
//! ranks. The default gradient treats the final LayerNorm statistics as
//! constants (the direct path); the exact LayerNorm Jacobian is also
//! available. Gradients through earlier layers are out of scope.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, InterventionSpec, ModelConfig, ModelWeights, NeuronRef};
use crate::tasks::StimulusItem;
use crate::tokenizer::{BpeVocab, TokenId};

/// How the final-LayerNorm is treated when projecting into the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LnMode {
    /// Mean/variance frozen at the item's observed values (direct path).
    Frozen,
    /// Full LayerNorm Jacobian at the observed residual.
    Exact,
}

impl std::fmt::Display for LnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LnMode::Frozen => write!(f, "frozen"),
            LnMode::Exact => write!(f, "exact"),
        }
    }
}

/// Unembedding-row difference `wte[target] − wte[distractor]`, exact in f64.
#[derive(Debug, Clone)]
pub struct DirectionOfInterest {
    pub u: Vec<f64>,
    pub target: TokenId,
    pub distractor: TokenId,
}

impl DirectionOfInterest {
    pub fn new(w: &ModelWeights, target: TokenId, distractor: TokenId) -> Result<Self> {
        let n_vocab = w.wte.rows();
        for id in [target, distractor] {
            if id.index() >= n_vocab {
                return Err(Error::TokenRange { id: id.0, n_vocab });
            }
        }
        let u = w
            .wte
            .row(target.index())
            .iter()
            .zip(w.wte.row(distractor.index()).iter())
            .map(|(a, b)| f64::from(*a) - f64::from(*b))
            .collect();
        Ok(Self {
            u,
            target,
            distractor,
        })
    }
}

/// Gradient of the logit difference with respect to the final residual,
/// restricted to the direct path through the final LayerNorm.
#[derive(Debug, Clone)]
pub struct LnGradient {
    pub g: Vec<f64>,
    pub mode: LnMode,
}

/// Compute the direction gradient for one item's trace.
///
/// Frozen: `g = (gain ⊙ u) / sqrt(var + eps)` with the item's observed
/// statistics held constant. Exact: `g = Jᵀu` where `J` is the LayerNorm
/// Jacobian at the observed residual.
pub fn ln_direction_gradient(
    trace: &ForwardTrace,
    w: &ModelWeights,
    cfg: &ModelConfig,
    doi: &DirectionOfInterest,
    mode: LnMode,
) -> LnGradient {
    let d = cfg.d_model;
    let eps = f64::from(cfg.ln_eps);
    let var = f64::from(trace.ln_f_stats.variance);
    let sigma = (var + eps).sqrt();
    let gain = &w.ln_f.gain.0;

    let g = match mode {
        LnMode::Frozen => (0..d)
            .map(|i| f64::from(gain[i]) * doi.u[i] / sigma)
            .collect(),
        LnMode::Exact => {
            let mean = f64::from(trace.ln_f_stats.mean);
            let xhat: Vec<f64> = trace
                .final_residual
                .0
                .iter()
                .map(|&r| (f64::from(r) - mean) / sigma)
                .collect();
            let ug: Vec<f64> = (0..d).map(|i| doi.u[i] * f64::from(gain[i])).collect();
            let s: f64 = ug.iter().sum();
            let q: f64 = ug.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
            let df = d as f64;
            (0..d)
                .map(|i| (ug[i] - s / df - xhat[i] * q / df) / sigma)
                .collect()
        }
    };
    LnGradient { g, mode }
}

/// One neuron's direct effect for one item:
/// `a_n · (w_out_n · g)` with the activation taken at the final position.
pub fn direct_effect_item(
    trace: &ForwardTrace,
    w: &ModelWeights,
    n: NeuronRef,
    grad: &LnGradient,
) -> f64 {
    let a = f64::from(trace.mlp_acts[n.layer][n.neuron]);
    let row = w.blocks[n.layer].mlp_proj.weight.row(n.neuron);
    let mut dot = 0.0f64;
    for (wv, gv) in row.iter().zip(grad.g.iter()) {
        dot += f64::from(*wv) * gv;
    }
    a * dot
}

/// Accumulative direct effects of every neuron over a probe set.
#[derive(Debug, Clone)]
pub struct DirectEffectLedger {
    pub task: String,
    pub n_items: usize,
    pub mode: LnMode,
    n_layer: usize,
    d_mlp: usize,
    effects: Vec<f64>,
}

impl DirectEffectLedger {
    fn index(&self, n: NeuronRef) -> usize {
        n.layer * self.d_mlp + n.neuron
    }

    pub fn len(&self) -> usize {
        self.effects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }

    pub fn effect(&self, n: NeuronRef) -> f64 {
        self.effects[self.index(n)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronRef, f64)> + '_ {
        (0..self.n_layer).flat_map(move |layer| {
            (0..self.d_mlp).map(move |neuron| {
                let n = NeuronRef::new(layer, neuron);
                (n, self.effect(n))
            })
        })
    }

    /// CSV with columns layer, neuron, effect (shortest round-trip f64).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "layer,neuron,effect")?;
        for (n, e) in self.iter() {
            writeln!(f, "{},{},{}", n.layer, n.neuron, e)?;
        }
        Ok(())
    }

    /// JSON sidecar describing what the CSV was computed over.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let body = serde_json::json!({
            "task": self.task,
            "n_items": self.n_items,
            "mode": self.mode,
            "n_layer": self.n_layer,
            "d_mlp": self.d_mlp,
        });
        std::fs::write(path, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }

    /// Reload a ledger from its CSV + sidecar pair.
    pub fn read_files(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Sidecar {
            task: String,
            n_items: usize,
            mode: LnMode,
            n_layer: usize,
            d_mlp: usize,
        }
        let sc: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let text = std::fs::read_to_string(csv_path)?;
        let mut effects = vec![0.0f64; sc.n_layer * sc.d_mlp];
        let mut seen = 0usize;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse_err = |msg: String| Error::Parse {
                path: csv_path.display().to_string(),
                line: lineno + 1,
                message: msg,
            };
            let layer: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad layer".into()))?;
            let neuron: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad neuron".into()))?;
            let effect: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad effect".into()))?;
            if layer >= sc.n_layer || neuron >= sc.d_mlp {
                return Err(parse_err(format!("neuron L{layer}N{neuron} out of range")));
            }
            effects[layer * sc.d_mlp + neuron] = effect;
            seen += 1;
        }
        if seen != effects.len() {
            return Err(Error::Parse {
                path: csv_path.display().to_string(),
                line: 0,
                message: format!("expected {} rows, got {seen}", effects.len()),
            });
        }
        Ok(Self {
            task: sc.task,
            n_items: sc.n_items,
            mode: sc.mode,
            n_layer: sc.n_layer,
            d_mlp: sc.d_mlp,
            effects,
        })
    }
}

/// Per-item effect vector over all neurons: for each layer, the matvec
/// `W_out · g` scaled by the captured activations.
fn item_effect_vector(
    trace: &ForwardTrace,
    w: &ModelWeights,
    cfg: &ModelConfig,
    grad: &LnGradient,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.total_neurons());
    for (layer, blk) in w.blocks.iter().enumerate() {
        let acts = &trace.mlp_acts[layer];
        for neuron in 0..cfg.d_mlp {
            let row = blk.mlp_proj.weight.row(neuron);
            let mut dot = 0.0f64;
            for (wv, gv) in row.iter().zip(grad.g.iter()) {
                dot += f64::from(*wv) * gv;
            }
            out.push(f64::from(acts[neuron]) * dot);
        }
    }
    out
}

/// Build the accumulative ledger over `items` (uninstrumented forwards).
///
/// Traces are produced in parallel; the reduction runs in fixed item order
/// in f64, so the ledger is bit-reproducible for any thread count.
pub fn accumulate_effects(
    w: &ModelWeights,
    cfg: &ModelConfig,
    vocab: &BpeVocab,
    task_name: &str,
    items: &[StimulusItem],
    mode: LnMode,
) -> Result<DirectEffectLedger> {
    if items.is_empty() {
        return Err(Error::Param("probe set is empty".to_string()));
    }
    let per_item: Vec<Result<Vec<f64>>> = items
        .par_iter()
        .enumerate()
        .map(|(idx, item)| {
            let wrap = |e: Error| Error::Stage {
                stage: format!(
                    "item {idx} (pair {} variant {})",
                    item.pair_id,
                    item.variant.as_char()
                ),
                source: Box::new(e),
            };
            let tokens = vocab.encode(&item.prompt);
            let target = vocab.single_token_id(&item.target).map_err(wrap)?;
            let distractor = vocab.single_token_id(&item.distractor).map_err(wrap)?;
            let trace = forward(w, cfg, &tokens, &InterventionSpec::none()).map_err(wrap)?;
            let doi = DirectionOfInterest::new(w, target, distractor).map_err(wrap)?;
            let grad = ln_direction_gradient(&trace, w, cfg, &doi, mode);
            Ok(item_effect_vector(&trace, w, cfg, &grad))
        })
        .collect();

    let mut effects = vec![0.0f64; cfg.total_neurons()];
    for item in per_item {
        let v = item?;
        for (acc, x) in effects.iter_mut().zip(v.iter()) {
            *acc += x;
        }
    }
    Ok(DirectEffectLedger {
        task: task_name.to_string(),
        n_items: items.len(),
        mode,
        n_layer: cfg.n_layer,
        d_mlp: cfg.d_mlp,
        effects,
    })
}

/// Selection parameters: how many neurons to keep. Ranking is by signed
/// effect descending with (layer, neuron) ascending tie-break.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub k: usize,
}

/// The k neurons with the highest signed accumulative effects.
pub fn top_k(ledger: &DirectEffectLedger, sel: SelectionSpec) -> Result<Vec<NeuronRef>> {
    if sel.k == 0 || sel.k > ledger.len() {
        return Err(Error::Param(format!(
            "k = {} out of range 1..={}",
            sel.k,
            ledger.len()
        )));
    }
    let mut all: Vec<(NeuronRef, f64)> = ledger.iter().collect();
    all.sort_by(|(na, ea), (nb, eb)| {
        eb.partial_cmp(ea)
            .expect("ledger effects are finite")
            .then_with(|| na.cmp(nb))
    });
    Ok(all.into_iter().take(sel.k).map(|(n, _)| n).collect())
}

/// Each selected neuron's share of the selected set's total effect.
pub fn contribution_proportion(
    ledger: &DirectEffectLedger,
    selected: &[NeuronRef],
) -> Result<BTreeMap<NeuronRef, f64>> {
    if selected.is_empty() {
        return Err(Error::Param("empty selection".to_string()));
    }
    let denom: f64 = selected.iter().map(|&n| ledger.effect(n)).sum();
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "selected effects sum to zero; proportions undefined".to_string(),
        ));
    }
    Ok(selected
        .iter()
        .map(|&n| (n, ledger.effect(n) / denom))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::numerics::{matmul, Matrix};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ModelConfig, ModelWeights) {
        let cfg = fixtures::tiny_config(50);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = fixtures::random_weights(&cfg, &mut rng);
        (cfg, w)
    }

    fn trace_of(cfg: &ModelConfig, w: &ModelWeights, ids: &[u32]) -> ForwardTrace {
        let tokens: Vec<TokenId> = ids.iter().map(|&i| TokenId(i)).collect();
        forward(w, cfg, &tokens, &InterventionSpec::none()).unwrap()
    }

    #[test]
    fn zero_direction_gives_zero_gradient() {
        let (cfg, w) = tiny();
        let trace = trace_of(&cfg, &w, &[4, 8, 15]);
        let doi = DirectionOfInterest {
            u: vec![0.0; cfg.d_model],
            target: TokenId(0),
            distractor: TokenId(0),
        };
        for mode in [LnMode::Frozen, LnMode::Exact] {
            let g = ln_direction_gradient(&trace, &w, &cfg, &doi, mode);
            assert!(g.g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_gradient_unit_scale_case() {
        // gain = 1 and var = 1 − eps make sigma exactly 1, so g = u.
        // eps = 2^-20 keeps var + eps exactly 1.0 in floating point.
        let (mut cfg, mut w) = tiny();
        cfg.ln_eps = 2.0f32.powi(-20);
        w.ln_f.gain = crate::numerics::Vector(vec![1.0; cfg.d_model]);
        let mut trace = trace_of(&cfg, &w, &[1, 2, 3]);
        trace.ln_f_stats.variance = 1.0 - cfg.ln_eps;
        let doi = DirectionOfInterest::new(&w, TokenId(7), TokenId(9)).unwrap();
        let g = ln_direction_gradient(&trace, &w, &cfg, &doi, LnMode::Frozen);
        for (a, b) in g.g.iter().zip(doi.u.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn exact_gradient_matches_finite_difference() {
        let (cfg, w) = tiny();
        let trace = trace_of(&cfg, &w, &[3, 30, 21, 9]);
        let doi = DirectionOfInterest::new(&w, TokenId(11), TokenId(29)).unwrap();
        let grad = ln_direction_gradient(&trace, &w, &cfg, &doi, LnMode::Exact);

        // Central difference of logit_diff with respect to each residual
        // coordinate, recomputing LN statistics (the exact-mode semantics).
        let eps = f64::from(cfg.ln_eps);
        #[allow(clippy::needless_range_loop)]
        let ld = |r: &[f64]| -> f64 {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / r.len() as f64;
            let sigma = (var + eps).sqrt();
            let mut acc = 0.0;
            for i in 0..r.len() {
                let y = f64::from(w.ln_f.gain.0[i]) * (r[i] - mean) / sigma
                    + f64::from(w.ln_f.bias.0[i]);
                acc += doi.u[i] * y;
            }
            acc
        };
        let r0: Vec<f64> = trace
            .final_residual
            .0
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let h = 1e-3;
        for i in 0..cfg.d_model {
            let mut plus = r0.clone();
            plus[i] += h;
            let mut minus = r0.clone();
            minus[i] -= h;
            let fd = (ld(&plus) - ld(&minus)) / (2.0 * h);
            let denom = fd.abs().max(1e-6);
            assert!(
                ((grad.g[i] - fd) / denom).abs() <= 1e-3,
                "coord {i}: {} vs {}",
                grad.g[i],
                fd
            );
        }
    }

    #[test]
    fn direct_effect_zero_cases() {
        let (cfg, w) = tiny();
        let mut trace = trace_of(&cfg, &w, &[2, 3]);
        let doi = DirectionOfInterest::new(&w, TokenId(1), TokenId(2)).unwrap();
        let grad = ln_direction_gradient(&trace, &w, &cfg, &doi, LnMode::Frozen);
        let n = NeuronRef::new(1, 5);
        trace.mlp_acts[1].0[5] = 0.0;
        assert_eq!(direct_effect_item(&trace, &w, n, &grad), 0.0);

        // Orthogonal write vector: build a weights copy whose row is
        // orthogonal to g by subtracting the parallel component in f64
        // would still round; instead zero the row entirely.
        let mut w2 = w.clone();
        for v in w2.blocks[1].mlp_proj.weight.row_mut(5).iter_mut() {
            *v = 0.0;
        }
        let trace2 = trace_of(&cfg, &w2, &[2, 3]);
        let grad2 = ln_direction_gradient(&trace2, &w2, &cfg, &doi, LnMode::Frozen);
        assert_eq!(direct_effect_item(&trace2, &w2, n, &grad2), 0.0);
    }

    #[test]
    fn direct_effect_linear_in_activation() {
        let (cfg, w) = tiny();
        let trace = trace_of(&cfg, &w, &[10, 20, 30]);
        let doi = DirectionOfInterest::new(&w, TokenId(4), TokenId(40)).unwrap();
        let grad = ln_direction_gradient(&trace, &w, &cfg, &doi, LnMode::Frozen);
        let n = NeuronRef::new(0, 33);
        let base = direct_effect_item(&trace, &w, n, &grad);
        let mut doubled = trace.clone();
        doubled.mlp_acts[0].0[33] *= 2.0;
        assert_eq!(direct_effect_item(&doubled, &w, n, &grad), 2.0 * base);
    }

    #[test]
    fn layer_decomposition_identity() {
        // Sum of a_n · w_out_n plus the output bias reproduces each layer's
        // MLP output at the final position.
        let (cfg, w) = tiny();
        for seed in 0..20u32 {
            let ids: Vec<u32> = (0..6).map(|i| (seed * 7 + i * 13) % 50).collect();
            let trace = trace_of(&cfg, &w, &ids);
            for (layer, blk) in w.blocks.iter().enumerate() {
                let acts = &trace.mlp_acts[layer];
                let act_m = Matrix::from_vec(1, cfg.d_mlp, acts.0.clone()).unwrap();
                let engine = matmul(&act_m, &blk.mlp_proj.weight).unwrap();
                for j in 0..cfg.d_model {
                    let mut sum = 0.0f64;
                    for n in 0..cfg.d_mlp {
                        sum += f64::from(acts[n]) * f64::from(blk.mlp_proj.weight.row(n)[j]);
                    }
                    let want = sum + f64::from(blk.mlp_proj.bias.0[j]);
                    let got = f64::from(engine.at(0, j)) + f64::from(blk.mlp_proj.bias.0[j]);
                    assert!((want - got).abs() <= 1e-4, "layer {layer} dim {j}");
                }
            }
        }
    }

    fn toy_items(n: usize) -> Vec<StimulusItem> {
        use crate::tasks::Variant;
        (0..n)
            .map(|i| StimulusItem {
                pair_id: i,
                prompt: format!("the man said that {}", ["a", "b", "c"][i % 3]),
                target: " he".to_string(),
                distractor: " she".to_string(),
                condition: "toy".to_string(),
                variant: Variant::A,
            })
            .collect()
    }

    #[test]
    fn ledger_single_item_equals_per_item_effects() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = fixtures::fixture_vocab(dir.path()).unwrap();
        let cfg = fixtures::tiny_config(vocab.n_vocab());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = fixtures::random_weights(&cfg, &mut rng);
        let items = toy_items(1);

        let ledger = accumulate_effects(&w, &cfg, &vocab, "toy", &items, LnMode::Frozen).unwrap();
        assert_eq!(ledger.n_items, 1);

        let tokens = vocab.encode(&items[0].prompt);
        let trace = forward(&w, &cfg, &tokens, &InterventionSpec::none()).unwrap();
        let doi = DirectionOfInterest::new(
            &w,
            vocab.single_token_id(" he").unwrap(),
            vocab.single_token_id(" she").unwrap(),
        )
        .unwrap();
        let grad = ln_direction_gradient(&trace, &w, &cfg, &doi, LnMode::Frozen);
        for layer in 0..cfg.n_layer {
            for neuron in (0..cfg.d_mlp).step_by(7) {
                let n = NeuronRef::new(layer, neuron);
                assert_eq!(ledger.effect(n), direct_effect_item(&trace, &w, n, &grad));
            }
        }
    }

    #[test]
    fn ledger_doubles_when_items_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = fixtures::fixture_vocab(dir.path()).unwrap();
        let cfg = fixtures::tiny_config(vocab.n_vocab());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = fixtures::random_weights(&cfg, &mut rng);
        let items = toy_items(3);
        let doubled: Vec<StimulusItem> = items.iter().chain(items.iter()).cloned().collect();

        let a = accumulate_effects(&w, &cfg, &vocab, "toy", &items, LnMode::Frozen).unwrap();
        let b = accumulate_effects(&w, &cfg, &vocab, "toy", &doubled, LnMode::Frozen).unwrap();
        for (n, e) in a.iter() {
            let want = 2.0 * e;
            let tol = 1e-12 * want.abs().max(1.0);
            assert!((b.effect(n) - want).abs() <= tol, "{n}");
        }
    }

    #[test]
    fn planted_neuron_tops_ledger_and_selection() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = fixtures::fixture_vocab(dir.path()).unwrap();
        let cfg = fixtures::tiny_config(vocab.n_vocab());
        let planted = NeuronRef::new(1, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = fixtures::planted_weights(
            &cfg,
            &mut rng,
            planted,
            vocab.single_token_id(" he").unwrap(),
            vocab.single_token_id(" she").unwrap(),
            1.0,
        );
        let items = toy_items(4);
        let ledger = accumulate_effects(&w, &cfg, &vocab, "toy", &items, LnMode::Frozen).unwrap();

        let best = ledger
            .iter()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .unwrap();
        assert_eq!(best.0, planted);

        let top = top_k(&ledger, SelectionSpec { k: 5 }).unwrap();
        assert_eq!(top[0], planted);

        let top50 = top_k(&ledger, SelectionSpec { k: 50 }).unwrap();
        let props = contribution_proportion(&ledger, &top50).unwrap();
        let planted_prop = props[&planted];
        for (&n, &p) in &props {
            if n != planted {
                assert!(planted_prop > p, "{n} has {p} >= {planted_prop}");
            }
        }
        let total: f64 = props.values().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn top_k_tie_break_and_full_ordering() {
        let ledger = DirectEffectLedger {
            task: "t".into(),
            n_items: 1,
            mode: LnMode::Frozen,
            n_layer: 2,
            d_mlp: 3,
            effects: vec![1.0; 6],
        };
        let order = top_k(&ledger, SelectionSpec { k: 6 }).unwrap();
        let want: Vec<NeuronRef> = (0..2)
            .flat_map(|l| (0..3).map(move |n| NeuronRef::new(l, n)))
            .collect();
        assert_eq!(order, want);
        assert!(top_k(&ledger, SelectionSpec { k: 7 }).is_err());
        assert!(top_k(&ledger, SelectionSpec { k: 0 }).is_err());

        // Signed ranking: a large negative effect is ranked last.
        let mut effects = vec![0.5; 6];
        effects[4] = -3.0;
        effects[2] = 2.0;
        let ledger = DirectEffectLedger { effects, ..ledger };
        let order = top_k(&ledger, SelectionSpec { k: 6 }).unwrap();
        assert_eq!(order[0], NeuronRef::new(0, 2));
        assert_eq!(order[5], NeuronRef::new(1, 1));
    }

    #[test]
    fn proportions_single_and_degenerate() {
        let ledger = DirectEffectLedger {
            task: "t".into(),
            n_items: 1,
            mode: LnMode::Frozen,
            n_layer: 1,
            d_mlp: 2,
            effects: vec![3.5, -3.5],
        };
        let one = contribution_proportion(&ledger, &[NeuronRef::new(0, 0)]).unwrap();
        assert_eq!(one[&NeuronRef::new(0, 0)], 1.0);
        assert!(matches!(
            contribution_proportion(&ledger, &[NeuronRef::new(0, 0), NeuronRef::new(0, 1)]),
            Err(Error::Degenerate(_))
        ));
        assert!(contribution_proportion(&ledger, &[]).is_err());
    }

    #[test]
    fn ledger_files_round_trip() {
        let (cfg, w) = tiny();
        let _ = (cfg, w);
        let ledger = DirectEffectLedger {
            task: "rt".into(),
            n_items: 3,
            mode: LnMode::Exact,
            n_layer: 2,
            d_mlp: 4,
            effects: (0..8).map(|i| (i as f64) * 0.125 - 0.3).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("ledger.csv");
        let sidecar = dir.path().join("ledger.json");
        ledger.write_csv(&csv).unwrap();
        ledger.write_sidecar(&sidecar).unwrap();
        let back = DirectEffectLedger::read_files(&csv, &sidecar).unwrap();
        assert_eq!(back.task, "rt");
        assert_eq!(back.n_items, 3);
        assert_eq!(back.mode, LnMode::Exact);
        for (n, e) in ledger.iter() {
            assert_eq!(back.effect(n), e, "{n}");
        }
    }
}
