//! Python bindings: vocabulary, model forward with interventions, direct
//! effects, statistics and the full experiment pipeline.
//!
//! Build with `cargo build -p neuroprobe-py --release`; the resulting
//! cdylib imports as the `neuroprobe_py` module (see python/smoke_test.py).

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use neuroprobe::archive::read_metadata;
use neuroprobe::attribution::{accumulate_effects, top_k, LnMode, SelectionSpec};
use neuroprobe::model::{
    forward, load_weights_remapped, ForwardTrace, InterventionSpec, ModelConfig, ModelWeights,
    NeuronRef, PositionScope,
};
use neuroprobe::pipeline::{BaselineSpec, ExperimentPlan, PoolingRule, SplitRule};
use neuroprobe::tasks::{load_task, split_probe_test};
use neuroprobe::tokenizer::{load_vocab, BpeVocab, TokenId};

fn err(e: neuroprobe::Error) -> PyErr {
    match e {
        neuroprobe::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(format!("{other:#}")),
    }
}

fn parse_ln_mode(s: &str) -> PyResult<LnMode> {
    match s {
        "frozen" => Ok(LnMode::Frozen),
        "exact" => Ok(LnMode::Exact),
        other => Err(PyValueError::new_err(format!(
            "ln_mode must be 'frozen' or 'exact', got {other:?}"
        ))),
    }
}

fn parse_positions(s: &str) -> PyResult<PositionScope> {
    match s {
        "all" => Ok(PositionScope::All),
        "final" => Ok(PositionScope::Final),
        other => Err(PyValueError::new_err(format!(
            "positions must be 'all' or 'final', got {other:?}"
        ))),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None().into_bound(py),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.into_any(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_any()
        }
    })
}

/// Byte-level BPE vocabulary.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: Arc<BpeVocab>,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn load(vocab_path: PathBuf, merges_path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(load_vocab(&vocab_path, &merges_path).map_err(err)?),
        })
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text).iter().map(|t| t.0).collect()
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        let ids: Vec<TokenId> = ids.into_iter().map(TokenId).collect();
        self.inner.decode(&ids).map_err(err)
    }

    /// The token id iff `text` encodes to exactly one token; raises otherwise.
    fn single_token_id(&self, text: &str) -> PyResult<u32> {
        Ok(self.inner.single_token_id(text).map_err(err)?.0)
    }

    #[getter]
    fn n_vocab(&self) -> usize {
        self.inner.n_vocab()
    }
}

/// Captured forward-pass state at the prediction position.
#[pyclass(name = "Trace")]
struct PyTrace {
    inner: ForwardTrace,
}

#[pymethods]
impl PyTrace {
    fn logits(&self) -> Vec<f32> {
        self.inner.logits.0.clone()
    }

    fn final_residual(&self) -> Vec<f32> {
        self.inner.final_residual.0.clone()
    }

    fn mlp_acts(&self, layer: usize) -> PyResult<Vec<f32>> {
        self.inner
            .mlp_acts
            .get(layer)
            .map(|v| v.0.clone())
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))
    }

    fn logit_diff(&self, target: u32, distractor: u32) -> PyResult<f64> {
        neuroprobe::model::logit_diff(&self.inner, TokenId(target), TokenId(distractor))
            .map_err(err)
    }

    #[getter]
    fn ln_f_stats(&self) -> (f32, f32) {
        (self.inner.ln_f_stats.mean, self.inner.ln_f_stats.variance)
    }
}

/// A loaded GPT-2-family model (weights + config).
#[pyclass(name = "Model")]
struct PyModel {
    config: ModelConfig,
    weights: Arc<ModelWeights>,
}

#[pymethods]
impl PyModel {
    /// Load from an archive; config comes from the embedded metadata unless
    /// `config_json` is given. `remap` translates third-party tensor names.
    #[staticmethod]
    #[pyo3(signature = (weights_path, config_json=None, remap=None))]
    fn load(
        weights_path: PathBuf,
        config_json: Option<&str>,
        remap: Option<PathBuf>,
    ) -> PyResult<Self> {
        let config: ModelConfig = match config_json {
            Some(text) => serde_json::from_str(text)
                .map_err(|e| PyValueError::new_err(format!("config_json: {e}")))?,
            None => {
                let meta = read_metadata(&weights_path).map_err(err)?;
                ModelConfig::from_metadata(&meta).ok_or_else(|| {
                    PyValueError::new_err("archive carries no config metadata; pass config_json")
                })?
            }
        };
        let remap = match remap {
            Some(path) => Some(neuroprobe::archive::load_remap(&path).map_err(err)?),
            None => None,
        };
        let weights = load_weights_remapped(&weights_path, &config, remap.as_ref()).map_err(err)?;
        Ok(Self {
            config,
            weights: Arc::new(weights),
        })
    }

    #[getter]
    fn n_layer(&self) -> usize {
        self.config.n_layer
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.config.d_model
    }

    #[getter]
    fn d_mlp(&self) -> usize {
        self.config.d_mlp
    }

    #[getter]
    fn n_vocab(&self) -> usize {
        self.config.n_vocab
    }

    /// Forward pass over `tokens` with an optional intervention:
    /// `neurons` is a list of (layer, neuron) pairs, `factor` the
    /// multiplier (0.0 ablates), `positions` "all" or "final".
    #[pyo3(signature = (tokens, neurons=None, factor=1.0, positions="all"))]
    fn forward(
        &self,
        tokens: Vec<u32>,
        neurons: Option<Vec<(usize, usize)>>,
        factor: f32,
        positions: &str,
    ) -> PyResult<PyTrace> {
        let tokens: Vec<TokenId> = tokens.into_iter().map(TokenId).collect();
        let scope = parse_positions(positions)?;
        let iv = match neurons {
            None => InterventionSpec::none(),
            Some(list) => InterventionSpec::scale(
                factor,
                list.into_iter().map(|(l, n)| NeuronRef::new(l, n)),
                scope,
            )
            .map_err(err)?,
        };
        let trace = forward(&self.weights, &self.config, &tokens, &iv).map_err(err)?;
        Ok(PyTrace { inner: trace })
    }

    /// Accumulative direct effects over a task's probe half; returns the
    /// top-k as a list of (layer, neuron, effect) triples.
    #[pyo3(signature = (vocab, task_path, k=50, ln_mode="frozen", split_seed=None))]
    fn probe_top_k(
        &self,
        vocab: &PyVocab,
        task_path: PathBuf,
        k: usize,
        ln_mode: &str,
        split_seed: Option<u64>,
    ) -> PyResult<Vec<(usize, usize, f64)>> {
        let mode = parse_ln_mode(ln_mode)?;
        let task = load_task(&task_path, &vocab.inner).map_err(err)?;
        let split = split_probe_test(&task, split_seed).map_err(err)?;
        let ledger = accumulate_effects(
            &self.weights,
            &self.config,
            &vocab.inner,
            &task.name,
            &split.probe,
            mode,
        )
        .map_err(err)?;
        let selected = top_k(&ledger, SelectionSpec { k }).map_err(err)?;
        Ok(selected
            .into_iter()
            .map(|n| (n.layer, n.neuron, ledger.effect(n)))
            .collect())
    }

    /// Run the full experiment pipeline; returns the report as a dict.
    #[pyo3(signature = (
        vocab, task_path, k=vec![5, 50], ln_mode="frozen", split_seed=None,
        scale_factor=2.0, baseline_reps=20, baseline_seed=0, positions="all",
        pooling="pooled", run_interventions=true, out_dir=None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn run_experiment<'py>(
        &self,
        py: Python<'py>,
        vocab: &PyVocab,
        task_path: PathBuf,
        k: Vec<usize>,
        ln_mode: &str,
        split_seed: Option<u64>,
        scale_factor: f32,
        baseline_reps: usize,
        baseline_seed: u64,
        positions: &str,
        pooling: &str,
        run_interventions: bool,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let plan = ExperimentPlan {
            task_path,
            split: match split_seed {
                None => SplitRule::Parity,
                Some(s) => SplitRule::Seeded(s),
            },
            ln_mode: parse_ln_mode(ln_mode)?,
            k_values: k,
            run_interventions,
            scale_factor,
            baseline: BaselineSpec {
                reps: baseline_reps,
                seed: baseline_seed,
            },
            positions: parse_positions(positions)?,
            pooling: match pooling {
                "pooled" => PoolingRule::PooledMean,
                "variant-a" => PoolingRule::VariantA,
                other => {
                    return Err(PyValueError::new_err(format!(
                        "pooling must be 'pooled' or 'variant-a', got {other:?}"
                    )))
                }
            },
        };
        let report = neuroprobe::pipeline::run_experiment(
            &self.weights,
            &self.config,
            &vocab.inner,
            &plan,
            out_dir.as_deref(),
        )
        .map_err(err)?;
        let value =
            serde_json::to_value(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &value)
    }
}

/// One-sample t-test (one-tailed, H1: mean > mu0).
#[pyfunction]
#[pyo3(signature = (values, mu0=0.0))]
fn one_sample_t(py: Python<'_>, values: Vec<f64>, mu0: f64) -> PyResult<Bound<'_, PyAny>> {
    let r = neuroprobe::stats::one_sample_t(&values, mu0).map_err(err)?;
    let value = serde_json::to_value(&r).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// Upper-tail probability of Student's t.
#[pyfunction]
fn t_cdf_complement(t: f64, df: usize) -> f64 {
    neuroprobe::stats::t_cdf_complement(t, df)
}

/// Write a tiny planted-model bundle (weights, vocab, merges, task) for
/// demos and smoke tests; returns the paths and the planted neuron.
#[pyfunction]
#[pyo3(signature = (dir, seed=0))]
fn write_demo_bundle(py: Python<'_>, dir: PathBuf, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let bundle = neuroprobe::fixtures::write_demo_bundle(&dir, seed).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("weights", bundle.weights_path)?;
    dict.set_item("vocab", bundle.vocab_path)?;
    dict.set_item("merges", bundle.merges_path)?;
    dict.set_item("task", bundle.task_path)?;
    dict.set_item("planted", (bundle.planted.layer, bundle.planted.neuron))?;
    dict.set_item("target", bundle.target.0)?;
    dict.set_item("distractor", bundle.distractor.0)?;
    Ok(dict.into_any())
}

#[pymodule]
fn neuroprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(one_sample_t, m)?)?;
    m.add_function(wrap_pyfunction!(t_cdf_complement, m)?)?;
    m.add_function(wrap_pyfunction!(write_demo_bundle, m)?)?;
    Ok(())
}
