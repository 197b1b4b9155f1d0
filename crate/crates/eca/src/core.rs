//! The probability engine shared by every model family: projections onto
//! eigenfeatures, collapse probabilities, the soft/hard eigenfeature-class
//! mapping, per-class Bernoulli probabilities and prediction.
//!
//! Everything here is a pure function of its inputs; values are immutable
//! once constructed and safe to share across threads.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::rng::derive_rng;
use crate::{EcaError, Result};

/// One prepared observation: a unit-norm feature vector and (for labeled
/// data) its class.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Array1<f64>,
    pub label: Option<usize>,
}

impl Sample {
    /// Normalize a raw vector and attach its label.
    pub fn prepare(raw: ArrayView1<f64>, label: Option<usize>) -> Result<Self> {
        Ok(Sample {
            x: normalize(raw)?,
            label,
        })
    }
}

/// Trainable ECA parameters: eigenfeature matrix `P` (columns are
/// eigenfeatures, soft-orthogonal), raw mapping parameters `L`, and the
/// relaxation constants chi (sigmoid sharpness) and omega (sinusoid
/// frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct EcaModel {
    pub p: Array2<f64>,
    pub l: Array2<f64>,
    pub chi: f64,
    pub omega: f64,
}

impl EcaModel {
    pub fn new(p: Array2<f64>, l: Array2<f64>, chi: f64, omega: f64) -> Result<Self> {
        if p.nrows() != p.ncols() {
            return Err(EcaError::DimensionMismatch(format!(
                "P must be square, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if l.nrows() != p.nrows() {
            return Err(EcaError::DimensionMismatch(format!(
                "L has {} rows but P is {}x{}",
                l.nrows(),
                p.nrows(),
                p.ncols()
            )));
        }
        if chi <= 0.0 || omega <= 0.0 {
            return Err(EcaError::Config(format!(
                "chi and omega must be positive (chi={chi}, omega={omega})"
            )));
        }
        Ok(EcaModel { p, l, chi, omega })
    }

    /// Feature dimension m.
    pub fn m(&self) -> usize {
        self.p.nrows()
    }

    /// Class count l.
    pub fn classes(&self) -> usize {
        self.l.ncols()
    }

    /// Derived eigenfeature-class mapping.
    pub fn ecmm(&self) -> Ecmm {
        Ecmm::from_soft(ecmm_soft(&self.l, self.chi, self.omega))
    }
}

/// The eigenfeature-class mapping: soft relaxation, its binary rounding and
/// the per-eigenfeature overlap counts (row sums of the hard matrix).
#[derive(Debug, Clone)]
pub struct Ecmm {
    pub soft: Array2<f64>,
    pub hard: Array2<u8>,
    pub overlap: Vec<u32>,
}

impl Ecmm {
    /// Build from a soft (or already binary) mapping matrix. Entries at
    /// exactly 0.5 round down: a tie is a non-assignment.
    pub fn from_soft(soft: Array2<f64>) -> Self {
        let hard = soft.mapv(|v| u8::from(v > 0.5));
        let overlap = hard
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&b| u32::from(b)).sum())
            .collect();
        Ecmm {
            soft,
            hard,
            overlap,
        }
    }

    pub fn m(&self) -> usize {
        self.soft.nrows()
    }

    pub fn classes(&self) -> usize {
        self.soft.ncols()
    }
}

/// Probability mode: raw superposition, or reweighted by each
/// eigenfeature's degree of overlapping so the outputs form a PMF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmfMode {
    Unmodified,
    Modified,
}

/// Full probability breakdown for one input.
#[derive(Debug, Clone)]
pub struct ProbabilityReport {
    /// Independent per-class Bernoulli probabilities p_k.
    pub per_class: Array1<f64>,
    /// Stacked PMFs, row k = (p_k, 1 - p_k).
    pub stacked: Array2<f64>,
    /// Collapse probabilities over the eigenfeatures.
    pub collapse: Array1<f64>,
}

/// Scale a raw vector to unit l2 norm.
pub fn normalize(raw: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(EcaError::ZeroVector(format!(
            "cannot normalize a vector with norm {norm:.3e}"
        )));
    }
    Ok(raw.mapv(|v| v / norm))
}

/// Soft mapping matrix: sigmoid(chi * sin(omega * L)), entrywise.
pub fn ecmm_soft(l: &Array2<f64>, chi: f64, omega: f64) -> Array2<f64> {
    l.mapv(|v| sigmoid(chi * (omega * v).sin()))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Squared projections of a unit input on every eigenfeature. Sums to 1
/// exactly when P is orthogonal; callers decide what a drift means.
pub fn collapse_probabilities(x: ArrayView1<f64>, p: &Array2<f64>) -> Array1<f64> {
    let proj = x.dot(p);
    proj.mapv(|v| v * v)
}

/// Per-class probabilities from precomputed collapse probabilities and a
/// mapping. Modified mode divides each eigenfeature's contribution by its
/// degree of overlapping (soft row sum); rows mapping to nothing contribute
/// no mass.
pub fn class_probabilities_from(
    collapse: ArrayView1<f64>,
    ecmm: &Ecmm,
    mode: PmfMode,
) -> Array1<f64> {
    let (m, l) = (ecmm.m(), ecmm.classes());
    let mut out = Array1::<f64>::zeros(l);
    match mode {
        PmfMode::Unmodified => {
            for j in 0..m {
                let c = collapse[j];
                for k in 0..l {
                    out[k] += c * ecmm.soft[[j, k]];
                }
            }
        }
        PmfMode::Modified => {
            for j in 0..m {
                let s: f64 = ecmm.soft.row(j).sum();
                if s < 1e-12 {
                    continue;
                }
                let c = collapse[j] / s;
                for k in 0..l {
                    out[k] += c * ecmm.soft[[j, k]];
                }
            }
        }
    }
    out
}

/// Per-class probabilities of a unit input under a model.
pub fn class_probabilities(x: ArrayView1<f64>, model: &EcaModel, mode: PmfMode) -> Array1<f64> {
    let collapse = collapse_probabilities(x, &model.p);
    class_probabilities_from(collapse.view(), &model.ecmm(), mode)
}

/// p_c * prod_{k != c} (1 - p_k): the probability that the input belongs to
/// class c and to no other class.
pub fn mutual_exclusive_probability(p: ArrayView1<f64>, c: usize) -> f64 {
    let mut acc = p[c];
    for (k, &pk) in p.iter().enumerate() {
        if k != c {
            acc *= 1.0 - pk;
        }
    }
    acc
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in p.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

/// Predicted class of a unit input: argmax of the modified per-class
/// probabilities (equivalent to the mutual-exclusive argmax).
pub fn predict(x: ArrayView1<f64>, model: &EcaModel) -> usize {
    argmax(class_probabilities(x, model, PmfMode::Modified).view())
}

/// Stack per-class Bernoulli probabilities into an l x 2 matrix of PMFs.
pub fn stacked_pmf(p: ArrayView1<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((p.len(), 2));
    for (k, &v) in p.iter().enumerate() {
        out[[k, 0]] = v;
        out[[k, 1]] = 1.0 - v;
    }
    out
}

/// Collapse, per-class and stacked probabilities for one input.
pub fn probability_report(x: ArrayView1<f64>, model: &EcaModel, mode: PmfMode) -> ProbabilityReport {
    let collapse = collapse_probabilities(x, &model.p);
    let per_class = class_probabilities_from(collapse.view(), &model.ecmm(), mode);
    let stacked = stacked_pmf(per_class.view());
    ProbabilityReport {
        per_class,
        stacked,
        collapse,
    }
}

/// Finite-shot estimate of a probability vector: each entry becomes r/Q with
/// r drawn from Binomial(Q, p_k) under the seeded generator.
pub fn estimate_probabilities_by_sampling(
    p: ArrayView1<f64>,
    shots: u64,
    seed: u64,
) -> Result<Array1<f64>> {
    if shots == 0 {
        return Err(EcaError::Config("shot count must be at least 1".into()));
    }
    let mut rng = derive_rng(seed, "shot-sampling");
    let mut out = Array1::<f64>::zeros(p.len());
    for (k, &pk) in p.iter().enumerate() {
        if !(0.0..=1.0).contains(&pk) {
            return Err(EcaError::Config(format!(
                "probability {pk} at index {k} outside [0, 1]"
            )));
        }
        let r = if pk == 0.0 {
            0
        } else if pk == 1.0 {
            shots
        } else {
            Binomial::new(shots, pk)
                .map_err(|e| EcaError::Numerical(e.to_string()))?
                .sample(&mut rng)
        };
        out[k] = r as f64 / shots as f64;
    }
    // Keep the stream position independent of how many entries short-circuit.
    let _ = rng.gen::<u64>();
    Ok(out)
}

/// Batch of squared projections: row i holds the collapse probabilities of
/// sample i.
pub(crate) fn collapse_matrix(x: ArrayView2<f64>, p: &Array2<f64>) -> Array2<f64> {
    let mut proj = x.dot(p);
    proj.mapv_inplace(|v| v * v);
    proj
}
