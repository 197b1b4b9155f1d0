//! Eigen component analysis (ECA): a family of linear learning models in which
//! an orthogonal matrix of *eigenfeatures* `P` and a relaxed binary
//! *eigenfeature-class mapping* derived from raw parameters `L` are trained
//! jointly so that squared projections of unit-norm inputs act as collapse
//! probabilities over the eigenfeatures and map, through the mapping matrix,
//! to independent per-class Bernoulli probabilities.
//!
//! The crate covers the supervised objectives (VECA/AECA/MSE/categorical),
//! multi-fold networks with dimension operators (ECAN), a generative variant
//! with per-(eigenfeature, class) normal models (GECA), EM-style clustering
//! (UECA), kernelized training (KECA), dataset generation and ingestion, and
//! model interpretation tooling (eigenvalue encodings, degeneracy and
//! crowdedness statistics, reconstructions, projection histograms).
//!
//! Batch computations fan out over fixed sample chunks with rayon when the
//! default `parallel` feature is enabled and fall back to a sequential loop
//! without it; either way partial results are reduced in chunk-index order,
//! so outputs are bit-identical across thread counts.

pub mod analysis;
pub mod core;
pub mod data;
pub mod ecan;
pub mod generative;
pub mod kernel;
pub mod linalg;
pub mod objectives;
mod parallel;
pub mod rng;
pub mod trainer;
pub mod unsupervised;

pub(crate) mod model_io;

use thiserror::Error;

/// Clamp applied to every probability before it is passed to a logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum EcaError {
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("count mismatch: {0}")]
    Mismatch(String),
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("eigenvalue {0} is not a power of two (not a pure eigenfeature)")]
    NotPure(u64),
    #[error("class {0} has no pure eigenfeatures")]
    NoPureEigenfeatures(usize),
    #[error("class {0} has no mapped eigenfeatures")]
    NoMappedEigenfeatures(usize),
    #[error("degenerate split: class {0} missing from the {1} side")]
    DegenerateSplit(usize, &'static str),
    #[error("no samples left after filtering")]
    EmptyAfterFilter,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EcaError>;

/// Parsing saved model files of any family.
pub mod model_file {
    use crate::Result;
    use serde_json::Value;

    /// Parse and version-check a model document.
    pub fn parse(text: &str) -> Result<Value> {
        crate::model_io::parse_document(text)
    }

    pub fn eca_from(doc: &Value) -> Result<crate::EcaModel> {
        crate::trainer::model_from_doc(doc)
    }

    pub fn geca_from(doc: &Value) -> Result<crate::generative::GecaModel> {
        crate::generative::geca_from_doc(doc)
    }

    pub fn ecan_from(doc: &Value) -> Result<crate::ecan::EcanModel> {
        crate::ecan::ecan_from_doc(doc)
    }
}

/// Entry points for the criterion benchmarks: the same batched computation
/// with the fan-out mode forced, so one build can measure both.
#[doc(hidden)]
pub mod bench_support {
    use crate::objectives::{Batch, Gradients, Objective, PenaltyWeights};
    use crate::EcaModel;

    pub fn gradients_forced(
        batch: Batch,
        model: &EcaModel,
        w: &PenaltyWeights,
        objective: Objective,
        parallel: bool,
    ) -> (f64, Gradients) {
        crate::objectives::loss_and_gradients_forced(batch, model, w, objective, 1.0, parallel)
    }
}

pub use crate::core::{EcaModel, Ecmm, PmfMode, ProbabilityReport, Sample};
pub use crate::objectives::{Gradients, Objective, PenaltyWeights, SparsityKind};
pub use crate::trainer::{EvalReport, TrainConfig, TrainOutcome};
