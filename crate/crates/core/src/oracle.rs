//! Independent brute-force implementations used only for validation.
//!
//! Everything here is single-threaded f64 and deliberately shares no
//! kernels with the engine: a straight-line forward pass (optionally with
//! neurons zeroed or the MLPs reduced to their output biases), a
//! residual-injection finite-difference estimate of the direct effect, and
//! the total (indirect paths included) ablation delta.

#![allow(clippy::needless_range_loop)] // straight-line indexed loops by design

use std::collections::BTreeSet;

use crate::attribution::LnMode;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelConfig, ModelWeights, NeuronRef};
use crate::tokenizer::TokenId;

/// Finite-difference settings.
#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    pub fd_step: f64,
    pub ln_mode: LnMode,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-3,
            ln_mode: LnMode::Frozen,
        }
    }
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn ln64(x: &[f64], gain: &[f32], bias: &[f32], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| f64::from(gain[i]) * (v - mean) * inv + f64::from(bias[i]))
        .collect()
}

enum MlpMode<'a> {
    Normal,
    Ablate(&'a BTreeSet<NeuronRef>),
    BiasOnly,
}

fn forward_impl(
    w: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    mlp: MlpMode<'_>,
) -> Result<Vec<f64>> {
    let seq = tokens.len();
    if seq == 0 || seq > cfg.n_ctx {
        return Err(Error::Input(format!(
            "sequence length {seq} outside 1..={}",
            cfg.n_ctx
        )));
    }
    for &t in tokens {
        if t.index() >= cfg.n_vocab {
            return Err(Error::Input(format!("token id {t} out of range")));
        }
    }
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let eps = f64::from(cfg.ln_eps);

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|j| f64::from(w.wte.at(id.index(), j)) + f64::from(w.wpe.at(pos, j)))
                .collect()
        })
        .collect();

    for (layer, blk) in w.blocks.iter().enumerate() {
        // Attention.
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|row| ln64(row, &blk.ln_1.gain.0, &blk.ln_1.bias.0, eps))
            .collect();
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|row| {
                (0..3 * d)
                    .map(|j| {
                        let mut acc = f64::from(blk.attn_qkv.bias.0[j]);
                        for (i, &v) in row.iter().enumerate() {
                            acc += v * f64::from(blk.attn_qkv.weight.at(i, j));
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut z = vec![vec![0.0f64; d]; seq];
        for head in 0..cfg.n_head {
            let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
            for t in 0..seq {
                let mut weights = Vec::with_capacity(t + 1);
                for s in 0..=t {
                    let mut dot = 0.0f64;
                    for c in 0..dh {
                        dot += qkv[t][qo + c] * qkv[s][ko + c];
                    }
                    weights.push(dot / (dh as f64).sqrt());
                }
                let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for v in weights.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                for (s, p) in weights.iter().enumerate() {
                    for c in 0..dh {
                        z[t][qo + c] += p / denom * qkv[s][vo + c];
                    }
                }
            }
        }
        for t in 0..seq {
            for j in 0..d {
                let mut acc = f64::from(blk.attn_proj.bias.0[j]);
                for i in 0..d {
                    acc += z[t][i] * f64::from(blk.attn_proj.weight.at(i, j));
                }
                x[t][j] += acc;
            }
        }

        // MLP.
        for t in 0..seq {
            let h2 = ln64(&x[t], &blk.ln_2.gain.0, &blk.ln_2.bias.0, eps);
            let mut contribution = vec![0.0f64; d];
            match mlp {
                MlpMode::BiasOnly => {}
                MlpMode::Normal | MlpMode::Ablate(_) => {
                    for n in 0..cfg.d_mlp {
                        let mut pre = f64::from(blk.mlp_fc.bias.0[n]);
                        for (i, &v) in h2.iter().enumerate() {
                            pre += v * f64::from(blk.mlp_fc.weight.at(i, n));
                        }
                        let mut act = gelu64(pre);
                        if let MlpMode::Ablate(set) = mlp {
                            if set.contains(&NeuronRef::new(layer, n)) {
                                act = 0.0;
                            }
                        }
                        for j in 0..d {
                            contribution[j] += act * f64::from(blk.mlp_proj.weight.at(n, j));
                        }
                    }
                }
            }
            for j in 0..d {
                x[t][j] += contribution[j] + f64::from(blk.mlp_proj.bias.0[j]);
            }
        }
    }

    let y = ln64(&x[seq - 1], &w.ln_f.gain.0, &w.ln_f.bias.0, eps);
    let mut logits = Vec::with_capacity(cfg.n_vocab);
    for v in 0..cfg.n_vocab {
        let mut acc = 0.0f64;
        for (j, &yv) in y.iter().enumerate() {
            acc += f64::from(w.wte.at(v, j)) * yv;
        }
        logits.push(acc);
    }
    Ok(logits)
}

/// Straight-line f64 forward; final-position logits.
pub fn oracle_forward(w: &ModelWeights, cfg: &ModelConfig, tokens: &[TokenId]) -> Result<Vec<f64>> {
    forward_impl(w, cfg, tokens, MlpMode::Normal)
}

/// Forward in which each block's MLP contributes only its output bias —
/// what ablating every neuron should reduce the model to.
pub fn oracle_forward_mlp_bias_only(
    w: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    forward_impl(w, cfg, tokens, MlpMode::BiasOnly)
}

/// Forward with the given neurons zeroed at every position.
pub fn oracle_forward_ablated(
    w: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    ablated: &BTreeSet<NeuronRef>,
) -> Result<Vec<f64>> {
    forward_impl(w, cfg, tokens, MlpMode::Ablate(ablated))
}

fn logit_diff_at_residual(
    w: &ModelWeights,
    cfg: &ModelConfig,
    residual: &[f64],
    frozen_stats: Option<(f64, f64)>,
    target: TokenId,
    distractor: TokenId,
) -> f64 {
    let d = cfg.d_model;
    let eps = f64::from(cfg.ln_eps);
    let (mean, var) = match frozen_stats {
        Some(s) => s,
        None => {
            let mean = residual.iter().sum::<f64>() / d as f64;
            let var = residual
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / d as f64;
            (mean, var)
        }
    };
    let inv = 1.0 / (var + eps).sqrt();
    let mut diff = 0.0f64;
    for j in 0..d {
        let y =
            f64::from(w.ln_f.gain.0[j]) * (residual[j] - mean) * inv + f64::from(w.ln_f.bias.0[j]);
        let u = f64::from(w.wte.at(target.index(), j)) - f64::from(w.wte.at(distractor.index(), j));
        diff += u * y;
    }
    diff
}

/// Residual-injection finite-difference estimate of a neuron's direct
/// effect: perturb the final residual by ±ε along the neuron's write
/// vector, take the central difference of the logit difference (LayerNorm
/// statistics frozen or recomputed per `oc.ln_mode`), and scale by the
/// neuron's activation.
pub fn fd_direct_effect(
    w: &ModelWeights,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    target: TokenId,
    distractor: TokenId,
    n: NeuronRef,
    oc: &OracleConfig,
) -> f64 {
    let a = f64::from(trace.mlp_acts[n.layer][n.neuron]);
    let row = w.blocks[n.layer].mlp_proj.weight.row(n.neuron);
    let r0: Vec<f64> = trace
        .final_residual
        .0
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let eps = oc.fd_step;
    let frozen = match oc.ln_mode {
        LnMode::Frozen => Some((
            f64::from(trace.ln_f_stats.mean),
            f64::from(trace.ln_f_stats.variance),
        )),
        LnMode::Exact => None,
    };
    let shift = |sign: f64| -> Vec<f64> {
        r0.iter()
            .zip(row.iter())
            .map(|(&r, &wv)| r + sign * eps * f64::from(wv))
            .collect()
    };
    let plus = logit_diff_at_residual(w, cfg, &shift(1.0), frozen, target, distractor);
    let minus = logit_diff_at_residual(w, cfg, &shift(-1.0), frozen, target, distractor);
    a * (plus - minus) / (2.0 * eps)
}

/// Total causal effect of ablating one neuron at all positions:
/// `logit_diff(baseline) − logit_diff(ablated)`, indirect paths included.
pub fn total_ablation_delta(
    w: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    target: TokenId,
    distractor: TokenId,
    n: NeuronRef,
) -> Result<f64> {
    for id in [target, distractor] {
        if id.index() >= cfg.n_vocab {
            return Err(Error::TokenRange {
                id: id.0,
                n_vocab: cfg.n_vocab,
            });
        }
    }
    let base = oracle_forward(w, cfg, tokens)?;
    let mut set = BTreeSet::new();
    set.insert(n);
    let ablated = oracle_forward_ablated(w, cfg, tokens, &set)?;
    let ld = |logits: &[f64]| logits[target.index()] - logits[distractor.index()];
    Ok(ld(&base) - ld(&ablated))
}
