//! taclab: a desk-scale laboratory for Tacotron-style sequence-to-sequence
//! speech synthesis models.
//!
//! The crate trains baseline and self-attention Tacotron variants (CBHL or
//! CNN encoders, small or large presets, phoneme+accent / character / phone
//! inputs) on synthetic corpora and analyzes their attention alignments:
//! fatal-alignment-error detection, error-rate aggregation, F0 variability
//! statistics, and Mann-Whitney rank tests.

pub mod attention;
pub mod check;
pub mod config;
pub mod diagnostics;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod training;

pub use graph::{Graph, Scalar, Var};
pub use rng::RngStream;

pub use ndarray;

/// Tool version recorded in run outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("out-of-vocabulary id {id} at position {position}")]
    OutOfVocab { id: usize, position: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;
