//! GPT-2-family decoder forward pass with hookable MLP neurons.
//!
//! The hook point is the post-GELU hidden vector of each block's MLP:
//! entries named by an [`InterventionSpec`] are multiplied by its factor
//! (0 for ablation) before the down-projection. The trace captures the
//! post-intervention activations, the pre-final-LayerNorm residual and the
//! logits at the prediction position.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive, Tensor32};
use crate::error::{Error, Result};
use crate::numerics::{gelu_tanh, layer_norm, matmul, matvec, mean_var, Matrix, Vector};
use crate::tokenizer::TokenId;

/// Architecture hyperparameters of a GPT-2-family decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_ctx: usize,
    pub n_vocab: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_layer >= 1
            && self.n_head >= 1
            && self.d_model >= 2
            && self.d_mlp >= 1
            && self.n_ctx >= 1
            && self.n_vocab >= 1
            && self.d_model.is_multiple_of(self.n_head)
            && self.ln_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid model config: {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn total_neurons(&self) -> usize {
        self.n_layer * self.d_mlp
    }

    /// GPT-2 XL: 48 layers, d_model 1600 (d_mlp 6400), 25 heads.
    pub fn gpt2_xl() -> Self {
        Self {
            n_layer: 48,
            n_head: 25,
            d_model: 1600,
            d_mlp: 6400,
            n_ctx: 1024,
            n_vocab: 50257,
            ln_eps: 1e-5,
        }
    }

    /// GPT-2 small: 12 layers, d_model 768.
    pub fn gpt2_small() -> Self {
        Self {
            n_layer: 12,
            n_head: 12,
            d_model: 768,
            d_mlp: 3072,
            n_ctx: 1024,
            n_vocab: 50257,
            ln_eps: 1e-5,
        }
    }

    /// Config from archive `__metadata__` string map, if all keys present.
    pub fn from_metadata(meta: &std::collections::BTreeMap<String, String>) -> Option<Self> {
        let get_usize = |k: &str| meta.get(k).and_then(|v| v.parse::<usize>().ok());
        Some(Self {
            n_layer: get_usize("n_layer")?,
            n_head: get_usize("n_head")?,
            d_model: get_usize("d_model")?,
            d_mlp: get_usize("d_mlp")?,
            n_ctx: get_usize("n_ctx")?,
            n_vocab: get_usize("n_vocab")?,
            ln_eps: meta.get("ln_eps").and_then(|v| v.parse::<f32>().ok())?,
        })
    }

    pub fn to_metadata(&self) -> std::collections::BTreeMap<String, String> {
        let mut m = std::collections::BTreeMap::new();
        m.insert("n_layer".into(), self.n_layer.to_string());
        m.insert("n_head".into(), self.n_head.to_string());
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("d_mlp".into(), self.d_mlp.to_string());
        m.insert("n_ctx".into(), self.n_ctx.to_string());
        m.insert("n_vocab".into(), self.n_vocab.to_string());
        m.insert("ln_eps".into(), format!("{}", self.ln_eps));
        m
    }
}

/// LayerNorm gain and bias.
#[derive(Debug, Clone)]
pub struct LnParams {
    pub gain: Vector,
    pub bias: Vector,
}

/// Affine map stored GPT-2 conv1d-style: weight is `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln_1: LnParams,
    pub attn_qkv: Linear,
    pub attn_proj: Linear,
    pub ln_2: LnParams,
    pub mlp_fc: Linear,
    pub mlp_proj: Linear,
}

/// Full parameter store. `wte` doubles as the unembedding (weight tying),
/// so the direction of interest is a difference of `wte` rows.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub wte: Matrix,
    pub wpe: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: LnParams,
}

/// Address of one MLP neuron: (layer, post-GELU hidden unit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronRef {
    pub fn new(layer: usize, neuron: usize) -> Self {
        Self { layer, neuron }
    }
}

impl std::fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}N{}", self.layer, self.neuron)
    }
}

/// Token positions an intervention applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionScope {
    All,
    Final,
}

/// A multiplicative intervention on a set of neurons. Ablation is
/// normalized on construction to scaling with factor 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    factor: f32,
    neurons: BTreeSet<NeuronRef>,
    positions: PositionScope,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self {
            factor: 1.0,
            neurons: BTreeSet::new(),
            positions: PositionScope::All,
        }
    }

    pub fn ablate<I: IntoIterator<Item = NeuronRef>>(neurons: I, positions: PositionScope) -> Self {
        Self {
            factor: 0.0,
            neurons: neurons.into_iter().collect(),
            positions,
        }
    }

    pub fn scale<I: IntoIterator<Item = NeuronRef>>(
        factor: f32,
        neurons: I,
        positions: PositionScope,
    ) -> Result<Self> {
        if !factor.is_finite() {
            return Err(Error::Param(format!("scale factor {factor} is not finite")));
        }
        Ok(Self {
            factor,
            neurons: neurons.into_iter().collect(),
            positions,
        })
    }

    pub fn factor(&self) -> f32 {
        self.factor
    }

    pub fn neurons(&self) -> &BTreeSet<NeuronRef> {
        &self.neurons
    }

    pub fn positions(&self) -> PositionScope {
        self.positions
    }

    pub fn is_noop(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn mode_label(&self) -> String {
        if self.neurons.is_empty() {
            "none".to_string()
        } else if self.factor == 0.0 {
            "ablate".to_string()
        } else {
            format!("scale-{}", self.factor)
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for n in &self.neurons {
            if n.layer >= cfg.n_layer || n.neuron >= cfg.d_mlp {
                return Err(Error::Param(format!(
                    "neuron {n} out of range for {} layers x {} units",
                    cfg.n_layer, cfg.d_mlp
                )));
            }
        }
        Ok(())
    }
}

/// Mean and population variance of the pre-final-LN residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LnStats {
    pub mean: f32,
    pub variance: f32,
}

/// Captured state of one forward pass at the prediction position.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Logits over the vocabulary at the captured position.
    pub logits: Vector,
    /// Residual stream at the captured position, before the final LayerNorm.
    pub final_residual: Vector,
    /// Post-GELU (post-intervention) MLP activations per layer at the
    /// captured position.
    pub mlp_acts: Vec<Vector>,
    /// Mean/variance of `final_residual` as used by the final LayerNorm.
    pub ln_f_stats: LnStats,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

enum Expected {
    Exact(Vec<usize>),
    // Linear weight declared [in, out]; a transposed checkpoint is detected
    // by shape and fixed. Squares resolve to the conv1d convention as-is.
    LinearInOut(usize, usize),
}

fn expected_tensors(cfg: &ModelConfig) -> Vec<(String, Expected)> {
    let d = cfg.d_model;
    let m = cfg.d_mlp;
    let mut v = vec![
        ("wte".to_string(), Expected::Exact(vec![cfg.n_vocab, d])),
        ("wpe".to_string(), Expected::Exact(vec![cfg.n_ctx, d])),
    ];
    for l in 0..cfg.n_layer {
        let p = format!("h.{l}");
        v.push((format!("{p}.ln_1.gain"), Expected::Exact(vec![d])));
        v.push((format!("{p}.ln_1.bias"), Expected::Exact(vec![d])));
        v.push((
            format!("{p}.attn.c_attn.weight"),
            Expected::LinearInOut(d, 3 * d),
        ));
        v.push((
            format!("{p}.attn.c_attn.bias"),
            Expected::Exact(vec![3 * d]),
        ));
        v.push((
            format!("{p}.attn.c_proj.weight"),
            Expected::LinearInOut(d, d),
        ));
        v.push((format!("{p}.attn.c_proj.bias"), Expected::Exact(vec![d])));
        v.push((format!("{p}.ln_2.gain"), Expected::Exact(vec![d])));
        v.push((format!("{p}.ln_2.bias"), Expected::Exact(vec![d])));
        v.push((format!("{p}.mlp.c_fc.weight"), Expected::LinearInOut(d, m)));
        v.push((format!("{p}.mlp.c_fc.bias"), Expected::Exact(vec![m])));
        v.push((
            format!("{p}.mlp.c_proj.weight"),
            Expected::LinearInOut(m, d),
        ));
        v.push((format!("{p}.mlp.c_proj.bias"), Expected::Exact(vec![d])));
    }
    v.push(("ln_f.gain".to_string(), Expected::Exact(vec![d])));
    v.push(("ln_f.bias".to_string(), Expected::Exact(vec![d])));
    v
}

fn take_tensor(archive: &mut Archive, name: &str, expected: &Expected) -> Result<Matrix> {
    let tensor = archive.tensors.remove(name).ok_or_else(|| Error::Load {
        name: name.to_string(),
        reason: "missing from archive".to_string(),
    })?;
    if tensor.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Load {
            name: name.to_string(),
            reason: "contains non-finite entries".to_string(),
        });
    }
    let to_matrix = |shape: &[usize], t: Tensor32| -> Result<Matrix> {
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Load {
                    name: name.to_string(),
                    reason: format!("unsupported rank {} shape {other:?}", other.len()),
                })
            }
        };
        Matrix::from_vec(rows, cols, t.data)
    };
    match expected {
        Expected::Exact(shape) => {
            if tensor.shape != *shape {
                return Err(Error::Load {
                    name: name.to_string(),
                    reason: format!("shape {:?}, expected {shape:?}", tensor.shape),
                });
            }
            let shape = tensor.shape.clone();
            to_matrix(&shape, tensor)
        }
        Expected::LinearInOut(rows, cols) => {
            if tensor.shape == [*rows, *cols] {
                let shape = tensor.shape.clone();
                to_matrix(&shape, tensor)
            } else if tensor.shape == [*cols, *rows] && rows != cols {
                let shape = tensor.shape.clone();
                Ok(to_matrix(&shape, tensor)?.transposed())
            } else {
                Err(Error::Load {
                    name: name.to_string(),
                    reason: format!(
                        "shape {:?}, expected [{rows}, {cols}] (or its transpose)",
                        tensor.shape
                    ),
                })
            }
        }
    }
}

fn row_vector(m: Matrix) -> Vector {
    Vector(m.data().to_vec())
}

impl ModelWeights {
    /// Assemble validated weights from a parsed archive.
    pub fn from_archive(mut archive: Archive, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = expected_tensors(cfg);
        let mut got: HashMap<String, Matrix> = HashMap::with_capacity(spec.len());
        for (name, expected) in &spec {
            got.insert(name.clone(), take_tensor(&mut archive, name, expected)?);
        }
        let mut take = |name: String| got.remove(&name).unwrap();
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for l in 0..cfg.n_layer {
            let p = format!("h.{l}");
            blocks.push(BlockWeights {
                ln_1: LnParams {
                    gain: row_vector(take(format!("{p}.ln_1.gain"))),
                    bias: row_vector(take(format!("{p}.ln_1.bias"))),
                },
                attn_qkv: Linear {
                    weight: take(format!("{p}.attn.c_attn.weight")),
                    bias: row_vector(take(format!("{p}.attn.c_attn.bias"))),
                },
                attn_proj: Linear {
                    weight: take(format!("{p}.attn.c_proj.weight")),
                    bias: row_vector(take(format!("{p}.attn.c_proj.bias"))),
                },
                ln_2: LnParams {
                    gain: row_vector(take(format!("{p}.ln_2.gain"))),
                    bias: row_vector(take(format!("{p}.ln_2.bias"))),
                },
                mlp_fc: Linear {
                    weight: take(format!("{p}.mlp.c_fc.weight")),
                    bias: row_vector(take(format!("{p}.mlp.c_fc.bias"))),
                },
                mlp_proj: Linear {
                    weight: take(format!("{p}.mlp.c_proj.weight")),
                    bias: row_vector(take(format!("{p}.mlp.c_proj.bias"))),
                },
            });
        }
        Ok(ModelWeights {
            wte: take("wte".to_string()),
            wpe: take("wpe".to_string()),
            blocks,
            ln_f: LnParams {
                gain: row_vector(take("ln_f.gain".to_string())),
                bias: row_vector(take("ln_f.bias".to_string())),
            },
        })
    }

    /// Export in canonical naming, for writing archives.
    pub fn to_tensor_map(&self) -> std::collections::BTreeMap<String, Tensor32> {
        let mut map = std::collections::BTreeMap::new();
        let mat = |m: &Matrix| Tensor32::new(vec![m.rows(), m.cols()], m.data().to_vec());
        let vec1 = |v: &Vector| Tensor32::new(vec![v.dim()], v.0.clone());
        map.insert("wte".to_string(), mat(&self.wte));
        map.insert("wpe".to_string(), mat(&self.wpe));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("h.{l}");
            map.insert(format!("{p}.ln_1.gain"), vec1(&b.ln_1.gain));
            map.insert(format!("{p}.ln_1.bias"), vec1(&b.ln_1.bias));
            map.insert(format!("{p}.attn.c_attn.weight"), mat(&b.attn_qkv.weight));
            map.insert(format!("{p}.attn.c_attn.bias"), vec1(&b.attn_qkv.bias));
            map.insert(format!("{p}.attn.c_proj.weight"), mat(&b.attn_proj.weight));
            map.insert(format!("{p}.attn.c_proj.bias"), vec1(&b.attn_proj.bias));
            map.insert(format!("{p}.ln_2.gain"), vec1(&b.ln_2.gain));
            map.insert(format!("{p}.ln_2.bias"), vec1(&b.ln_2.bias));
            map.insert(format!("{p}.mlp.c_fc.weight"), mat(&b.mlp_fc.weight));
            map.insert(format!("{p}.mlp.c_fc.bias"), vec1(&b.mlp_fc.bias));
            map.insert(format!("{p}.mlp.c_proj.weight"), mat(&b.mlp_proj.weight));
            map.insert(format!("{p}.mlp.c_proj.bias"), vec1(&b.mlp_proj.bias));
        }
        map.insert("ln_f.gain".to_string(), vec1(&self.ln_f.gain));
        map.insert("ln_f.bias".to_string(), vec1(&self.ln_f.bias));
        map
    }
}

/// Load weights from an archive file, validating every tensor against the
/// config shapes.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<ModelWeights> {
    load_weights_remapped(path, cfg, None)
}

/// Like [`load_weights`] with an optional name remapping (third-party name
/// → canonical name) applied before validation.
pub fn load_weights_remapped(
    path: &Path,
    cfg: &ModelConfig,
    remap: Option<&HashMap<String, String>>,
) -> Result<ModelWeights> {
    let mut archive = archive::read_archive(path)?;
    if let Some(remap) = remap {
        let mut renamed = std::collections::BTreeMap::new();
        for (name, tensor) in std::mem::take(&mut archive.tensors) {
            let canonical = remap.get(&name).cloned().unwrap_or(name);
            renamed.insert(canonical, tensor);
        }
        archive.tensors = renamed;
    }
    ModelWeights::from_archive(archive, cfg)
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn add_bias_rows(m: &mut Matrix, bias: &Vector) {
    let cols = m.cols();
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.0.iter()) {
            *v += b;
        }
        debug_assert_eq!(cols, bias.dim());
    }
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
        *d += s;
    }
}

/// Run the decoder and capture the trace at the last position.
pub fn forward(
    w: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    iv: &InterventionSpec,
) -> Result<ForwardTrace> {
    forward_at(w, cfg, tokens, iv, tokens.len().saturating_sub(1))
}

/// Run the decoder and capture the trace at `capture_pos`. Because the
/// attention is causally masked, the captured values equal those of a run
/// on the prefix `tokens[..=capture_pos]`.
pub fn forward_at(
    w: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    iv: &InterventionSpec,
    capture_pos: usize,
) -> Result<ForwardTrace> {
    let seq = tokens.len();
    if seq == 0 {
        return Err(Error::Input("empty token sequence".to_string()));
    }
    if seq > cfg.n_ctx {
        return Err(Error::Input(format!(
            "sequence of {seq} tokens exceeds n_ctx = {}",
            cfg.n_ctx
        )));
    }
    if capture_pos >= seq {
        return Err(Error::Input(format!(
            "capture position {capture_pos} outside sequence of {seq}"
        )));
    }
    for &t in tokens {
        if t.index() >= cfg.n_vocab {
            return Err(Error::Input(format!(
                "token id {t} out of range (n_vocab = {})",
                cfg.n_vocab
            )));
        }
    }
    iv.validate(cfg)?;

    let d = cfg.d_model;
    let heads = cfg.n_head;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    // Per-layer neuron index lists for the hook.
    let mut hooks: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_layer];
    for n in iv.neurons() {
        hooks[n.layer].push(n.neuron);
    }

    // Token + position embeddings.
    let mut x = Matrix::zeros(seq, d);
    for (t, &id) in tokens.iter().enumerate() {
        let wte_row = w.wte.row(id.index());
        let wpe_row = w.wpe.row(t);
        for (out, (a, b)) in x
            .row_mut(t)
            .iter_mut()
            .zip(wte_row.iter().zip(wpe_row.iter()))
        {
            *out = a + b;
        }
    }

    let mut mlp_acts: Vec<Vector> = Vec::with_capacity(cfg.n_layer);

    for (l, blk) in w.blocks.iter().enumerate() {
        // --- attention sublayer ---
        let mut h = Matrix::zeros(seq, d);
        for t in 0..seq {
            let normed = layer_norm(x.row(t), &blk.ln_1.gain.0, &blk.ln_1.bias.0, cfg.ln_eps);
            h.row_mut(t).copy_from_slice(&normed);
        }
        let mut qkv = matmul(&h, &blk.attn_qkv.weight)?;
        add_bias_rows(&mut qkv, &blk.attn_qkv.bias);

        let mut z = Matrix::zeros(seq, d);
        for head in 0..heads {
            let q_off = head * dh;
            let k_off = d + head * dh;
            let v_off = 2 * d + head * dh;
            for t in 0..seq {
                let q = &qkv.row(t)[q_off..q_off + dh];
                // Causal scores over s <= t with max-subtracted softmax.
                let mut scores = Vec::with_capacity(t + 1);
                let mut max = f32::NEG_INFINITY;
                for s in 0..=t {
                    let k = &qkv.row(s)[k_off..k_off + dh];
                    let mut dot = 0.0f32;
                    for (a, b) in q.iter().zip(k.iter()) {
                        dot += a * b;
                    }
                    let v = dot * scale;
                    if v > max {
                        max = v;
                    }
                    scores.push(v);
                }
                let mut denom = 0.0f32;
                for v in scores.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                let inv = 1.0 / denom;
                let z_row = z.row_mut(t);
                for (s, p) in scores.iter().enumerate() {
                    let weight = p * inv;
                    let v = &qkv.row(s)[v_off..v_off + dh];
                    for (c, &vv) in v.iter().enumerate() {
                        z_row[head * dh + c] += weight * vv;
                    }
                }
            }
        }
        let mut attn_out = matmul(&z, &blk.attn_proj.weight)?;
        add_bias_rows(&mut attn_out, &blk.attn_proj.bias);
        add_into(&mut x, &attn_out);

        // --- MLP sublayer (hook point) ---
        let mut h2 = Matrix::zeros(seq, d);
        for t in 0..seq {
            let normed = layer_norm(x.row(t), &blk.ln_2.gain.0, &blk.ln_2.bias.0, cfg.ln_eps);
            h2.row_mut(t).copy_from_slice(&normed);
        }
        let mut acts = matmul(&h2, &blk.mlp_fc.weight)?;
        add_bias_rows(&mut acts, &blk.mlp_fc.bias);
        for v in acts.data_mut() {
            *v = gelu_tanh(*v);
        }
        if !hooks[l].is_empty() {
            let rows: Vec<usize> = match iv.positions() {
                PositionScope::All => (0..seq).collect(),
                PositionScope::Final => vec![seq - 1],
            };
            for r in rows {
                let row = acts.row_mut(r);
                for &n in &hooks[l] {
                    row[n] *= iv.factor();
                }
            }
        }
        mlp_acts.push(Vector(acts.row(capture_pos).to_vec()));
        let mut mlp_out = matmul(&acts, &blk.mlp_proj.weight)?;
        add_bias_rows(&mut mlp_out, &blk.mlp_proj.bias);
        add_into(&mut x, &mlp_out);
    }

    let final_residual = Vector(x.row(capture_pos).to_vec());
    let (mean, variance) = mean_var(&final_residual.0);
    let y = layer_norm(
        &final_residual.0,
        &w.ln_f.gain.0,
        &w.ln_f.bias.0,
        cfg.ln_eps,
    );
    let logits = Vector(matvec(&w.wte, &y)?);

    Ok(ForwardTrace {
        logits,
        final_residual,
        mlp_acts,
        ln_f_stats: LnStats { mean, variance },
    })
}

/// `logits[target] − logits[distractor]` at the captured position.
///
/// Under softmax this equals `log p(target) − log p(distractor)`, so raw
/// logits carry the same information as the log probability ratio.
pub fn logit_diff(trace: &ForwardTrace, target: TokenId, distractor: TokenId) -> Result<f64> {
    let n = trace.logits.dim();
    for id in [target, distractor] {
        if id.index() >= n {
            return Err(Error::TokenRange {
                id: id.0,
                n_vocab: n,
            });
        }
    }
    Ok(f64::from(trace.logits[target.index()]) - f64::from(trace.logits[distractor.index()]))
}
