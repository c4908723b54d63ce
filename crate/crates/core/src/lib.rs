//! Desk-scale one-stage scene graph generation.
//!
//! A self-contained stack: a minimal f64 tensor core with reverse-mode
//! differentiation, a triplet-decoder transformer that predicts
//! `<subject, predicate, object>` sets directly from pixels, set-prediction
//! training with IoU-relaxed Hungarian assignment, a procedural synthetic
//! scene corpus with exact rule-derived ground truth, and the standard
//! recall / mean-recall / zero-shot / weighted-AP evaluation suite.

pub mod attention;
pub mod boxes;
pub mod commands;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
