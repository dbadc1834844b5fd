use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("SMILES syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("element '{symbol}' is not in the configured vocabulary")]
    Vocab { symbol: String },

    #[error("aromatic atom '{symbol}' at position {pos}: input must be kekulized")]
    Aromatic { symbol: String, pos: usize },

    #[error("molecule has {count} heavy atoms, the limit is {max}")]
    TooLarge { count: usize, max: usize },

    #[error("graph has {components} connected components")]
    Disconnected { components: usize },

    #[error("graph has no occupied atom slots")]
    EmptyGraph,

    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{name} = {value} is out of range ({expected})")]
    Range {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("actnorm layer used before data-dependent initialization")]
    NotInitialized,

    #[error("actnorm scale for channel {channel} is zero")]
    ZeroScale { channel: usize },

    #[error("mixing matrix is singular (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("no cached forward state for backward pass")]
    NoCache,

    #[error("unknown amino-acid letter '{letter}' at position {pos}")]
    Alphabet { letter: char, pos: usize },

    #[error("cannot compute statistics of an empty set")]
    Empty,

    #[error("vector is not unit-norm (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("uniformity loss needs embeddings from at least two distinct targets")]
    BatchTooSmall,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fingerprint widths differ ({left} vs {right})")]
    WidthMismatch { left: usize, right: usize },

    #[error("training set is empty")]
    EmptyTrain,

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn syntax(pos: usize, msg: impl Into<String>) -> Self {
        Error::Syntax {
            pos,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips any line-number wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLine { source, .. } => source.root(),
            other => other,
        }
    }
}
