//! A CPU laboratory for GPT-2-family models: hand-built inference kernels
//! with hookable MLP neurons, direct-effect attribution onto a
//! target-vs-distractor direction, causal interventions (ablation and
//! activation scaling), and a psycholinguistic experiment harness with the
//! statistics to match.
//!
//! The probe → select → intervene → test protocol lives in [`pipeline`];
//! [`oracle`] holds independent brute-force implementations used only to
//! validate the engine.

pub mod archive;
pub mod attribution;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod stats;
pub mod svg;
pub mod tasks;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{
    forward, forward_at, load_weights, load_weights_remapped, logit_diff, ForwardTrace,
    InterventionSpec, ModelConfig, ModelWeights, NeuronRef, PositionScope,
};
pub use tokenizer::{load_vocab, BpeVocab, TokenId};
