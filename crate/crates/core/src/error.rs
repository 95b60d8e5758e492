//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch in a linear-algebra operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A file failed to parse; `line` is 1-based where known (0 = unknown).
    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A target or distractor string does not encode to exactly one token.
    #[error("\"{text}\" tokenizes to {pieces} pieces, expected exactly 1")]
    MultiTokenTarget { text: String, pieces: usize },

    /// Token id outside the vocabulary.
    #[error("token id {id} out of range (n_vocab = {n_vocab})")]
    TokenRange { id: u32, n_vocab: usize },

    /// A tensor failed to load (missing, wrong shape, non-finite entries).
    #[error("tensor \"{name}\": {reason}")]
    Load { name: String, reason: String },

    /// Invalid forward-pass input (empty prompt, context overflow, bad id).
    #[error("input error: {0}")]
    Input(String),

    /// Out-of-range or inconsistent parameter value.
    #[error("parameter error: {0}")]
    Param(String),

    /// Task file violates the schema.
    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },

    /// Counterbalance pairing is broken or absent.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Probe/test split cannot be formed.
    #[error("split error: {0}")]
    Split(String),

    /// One stimulus item failed validation.
    #[error("pair {pair_id} variant {variant}: {source}")]
    Item {
        pair_id: usize,
        variant: char,
        #[source]
        source: Box<Error>,
    },

    /// Too few values for a statistic.
    #[error("need at least {need} values, got {got}")]
    SampleSize { need: usize, got: usize },

    /// A statistic is undefined on this sample (e.g. zero variance).
    #[error("degenerate sample: {0}")]
    Degenerate(String),

    /// A pipeline stage failed; names the stage for diagnostics.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
