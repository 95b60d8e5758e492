//! Deterministic tiny-model, vocabulary and task generators.
//!
//! Used by the test suites, the `oracle-check` subcommand and the Python
//! smoke script. The planted model construction gives ground truth for
//! selection and intervention tests: one neuron with a constant positive
//! activation whose write vector points along the direction of interest.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::write_archive;
use crate::error::Result;
use crate::model::{BlockWeights, Linear, LnParams, ModelConfig, ModelWeights, NeuronRef};
use crate::numerics::{Matrix, Vector};
use crate::tokenizer::{load_vocab, BpeVocab, TokenId};

/// Small test vocabulary shipped with the crate (byte-complete BPE).
pub const FIXTURE_VOCAB_JSON: &str = include_str!("../fixtures/vocab.json");
/// Merge list paired with [`FIXTURE_VOCAB_JSON`].
pub const FIXTURE_MERGES_TXT: &str = include_str!("../fixtures/merges.txt");

/// 2-layer config used throughout the tiny-model tests.
pub fn tiny_config(n_vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 4,
        d_model: 16,
        d_mlp: 64,
        n_ctx: 32,
        n_vocab,
        ln_eps: 1e-5,
    }
}

/// Random small config (≤ 4 layers, d_model ≤ 64) for oracle cross-checks.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    const DIMS: [(usize, usize); 4] = [(8, 2), (16, 4), (32, 4), (64, 8)];
    let (d_model, n_head) = DIMS[rng.random_range(0..DIMS.len())];
    ModelConfig {
        n_layer: rng.random_range(1..=4),
        n_head,
        d_model,
        d_mlp: 4 * d_model,
        n_ctx: 16,
        n_vocab: rng.random_range(17..=60),
        ln_eps: 1e-5,
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-amp..=amp))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn rand_vector(rng: &mut ChaCha8Rng, dim: usize, amp: f32) -> Vector {
    Vector((0..dim).map(|_| rng.random_range(-amp..=amp)).collect())
}

fn rand_ln(rng: &mut ChaCha8Rng, dim: usize) -> LnParams {
    LnParams {
        gain: Vector(
            (0..dim)
                .map(|_| 1.0 + rng.random_range(-0.05..=0.05))
                .collect(),
        ),
        bias: rand_vector(rng, dim, 0.02),
    }
}

/// Seeded random weights with activation-friendly scales.
pub fn random_weights(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelWeights {
    let d = cfg.d_model;
    let m = cfg.d_mlp;
    let w_amp = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
    let blocks = (0..cfg.n_layer)
        .map(|_| BlockWeights {
            ln_1: rand_ln(rng, d),
            attn_qkv: Linear {
                weight: rand_matrix(rng, d, 3 * d, w_amp(d)),
                bias: rand_vector(rng, 3 * d, 0.02),
            },
            attn_proj: Linear {
                weight: rand_matrix(rng, d, d, w_amp(d)),
                bias: rand_vector(rng, d, 0.02),
            },
            ln_2: rand_ln(rng, d),
            mlp_fc: Linear {
                weight: rand_matrix(rng, d, m, w_amp(d)),
                bias: rand_vector(rng, m, 0.02),
            },
            mlp_proj: Linear {
                weight: rand_matrix(rng, m, d, w_amp(m)),
                bias: rand_vector(rng, d, 0.02),
            },
        })
        .collect();
    ModelWeights {
        wte: rand_matrix(rng, cfg.n_vocab, d, 0.5),
        wpe: rand_matrix(rng, cfg.n_ctx, d, 0.1),
        blocks,
        ln_f: rand_ln(rng, d),
    }
}

/// Random weights with one planted neuron: its pre-activation is a constant
/// +2 (so the post-GELU activation is ≈1.95 for every input) and its write
/// vector is the unit vector along `wte[target] − wte[distractor]`, scaled
/// by `write_scale`.
pub fn planted_weights(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    planted: NeuronRef,
    target: TokenId,
    distractor: TokenId,
    write_scale: f32,
) -> ModelWeights {
    assert!(planted.layer < cfg.n_layer && planted.neuron < cfg.d_mlp);
    assert!(target.index() < cfg.n_vocab && distractor.index() < cfg.n_vocab);
    let mut w = random_weights(cfg, rng);

    let u: Vec<f32> = w
        .wte
        .row(target.index())
        .iter()
        .zip(w.wte.row(distractor.index()).iter())
        .map(|(a, b)| a - b)
        .collect();
    let norm = u.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);

    let blk = &mut w.blocks[planted.layer];
    for r in 0..blk.mlp_fc.weight.rows() {
        blk.mlp_fc.weight.row_mut(r)[planted.neuron] = 0.0;
    }
    blk.mlp_fc.bias.0[planted.neuron] = 2.0;
    let row = blk.mlp_proj.weight.row_mut(planted.neuron);
    for (out, v) in row.iter_mut().zip(u.iter()) {
        *out = write_scale * v / norm;
    }
    w
}

/// Everything needed to run the CLI end to end on a tiny planted model.
pub struct DemoBundle {
    pub weights_path: PathBuf,
    pub vocab_path: PathBuf,
    pub merges_path: PathBuf,
    pub task_path: PathBuf,
    pub config: ModelConfig,
    pub planted: NeuronRef,
    pub target: TokenId,
    pub distractor: TokenId,
}

/// Six single-variant pairs, all expecting " he" over " she".
fn demo_task_json() -> String {
    let prompts = [
        "The man said that",
        "Tom said that",
        "The old man said that",
        "Ben told the boss that",
        "The father said that",
        "Dan said that",
    ];
    let pairs: Vec<serde_json::Value> = prompts
        .iter()
        .map(|p| {
            serde_json::json!({
                "template": p,
                "variants": [{
                    "prompt_bindings": {},
                    "target": " he",
                    "distractor": " she",
                    "condition": "male-subject"
                }]
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "name": "planted-demo",
        "counterbalanced": false,
        "pairs": pairs,
    }))
    .expect("static json")
}

/// Write a complete planted bundle (vocab, merges, task, weight archive
/// with embedded config) into `dir`. Deterministic given `seed`.
pub fn write_demo_bundle(dir: &Path, seed: u64) -> Result<DemoBundle> {
    std::fs::create_dir_all(dir)?;
    let vocab_path = dir.join("vocab.json");
    let merges_path = dir.join("merges.txt");
    let task_path = dir.join("task.json");
    let weights_path = dir.join("model.safetensors");

    std::fs::write(&vocab_path, FIXTURE_VOCAB_JSON)?;
    std::fs::write(&merges_path, FIXTURE_MERGES_TXT)?;
    std::fs::write(&task_path, demo_task_json())?;

    let vocab = load_vocab(&vocab_path, &merges_path)?;
    let target = vocab.single_token_id(" he")?;
    let distractor = vocab.single_token_id(" she")?;

    let config = tiny_config(vocab.n_vocab());
    let planted = NeuronRef::new(config.n_layer - 1, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = planted_weights(&config, &mut rng, planted, target, distractor, 1.0);
    write_archive(
        &weights_path,
        &weights.to_tensor_map(),
        &config.to_metadata(),
    )?;

    Ok(DemoBundle {
        weights_path,
        vocab_path,
        merges_path,
        task_path,
        config,
        planted,
        target,
        distractor,
    })
}

/// Load the crate's fixture vocabulary from a temporary copy.
pub fn fixture_vocab(dir: &Path) -> Result<BpeVocab> {
    let vp = dir.join("vocab.json");
    let mp = dir.join("merges.txt");
    std::fs::write(&vp, FIXTURE_VOCAB_JSON)?;
    std::fs::write(&mp, FIXTURE_MERGES_TXT)?;
    load_vocab(&vp, &mp)
}
