//! Model interpretation: eigenvalue encodings of the mapping rows, pure
//! eigenfeatures, degeneracy/crowdedness/overlap statistics, the assembled
//! class-label operator H and its closed-form solution on unambiguous data,
//! basis transforms, class reconstructions and projection histograms.
//!
//! Everything here reads immutable models and datasets; CSV and PGM writers
//! are at the bottom.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::core::{EcaModel, Ecmm};
use crate::data::Prepared;
use crate::linalg::{spd_solve, symmetric_condition};
use crate::{EcaError, Result};

/// Per-eigenfeature integer eigenvalues: row [a_0, ..., a_{l-1}] of the hard
/// mapping encodes to sum a_k 2^k (class k occupies bit k).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EigenvalueEncoding {
    pub per_eigenfeature: Vec<u64>,
    pub classes: usize,
}

impl EigenvalueEncoding {
    /// Back to the binary row, lowest class first.
    pub fn decode(&self, value: u64) -> Vec<u8> {
        (0..self.classes).map(|k| ((value >> k) & 1) as u8).collect()
    }
}

/// Degeneracy, crowdedness and overlap statistics of a hard mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelStats {
    /// eigenvalue -> number of eigenfeatures encoding to it
    pub degeneracy: BTreeMap<u64, usize>,
    /// per-class count of mapped eigenfeatures (column sums)
    pub crowdedness: Vec<usize>,
    /// overlap degree k -> number of eigenfeatures shared by k classes
    pub overlap_histogram: BTreeMap<usize, usize>,
}

/// Soft-mapping diagnostics: how binary the relaxation actually is.
#[derive(Debug, Clone)]
pub struct SoftStats {
    pub max_entry: f64,
    pub mean_distance_to_binary: f64,
    pub frac_within_005: f64,
}

/// Reversed-binary encoding of every hard mapping row.
pub fn eigenvalue_encoding(ecmm: &Ecmm) -> Result<EigenvalueEncoding> {
    let l = ecmm.classes();
    if l > 63 {
        return Err(EcaError::Config(format!(
            "eigenvalue encoding supports at most 63 classes, got {l}"
        )));
    }
    let per_eigenfeature = ecmm
        .hard
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0u64, |acc, (k, &bit)| acc | (u64::from(bit) << k))
        })
        .collect();
    Ok(EigenvalueEncoding {
        per_eigenfeature,
        classes: l,
    })
}

/// Class label of a pure eigenfeature: log2 of its eigenvalue. Errors when
/// the eigenvalue is 0 or shared between classes.
pub fn pe_class_label(eigenvalue: u64) -> Result<usize> {
    if eigenvalue == 0 || !eigenvalue.is_power_of_two() {
        return Err(EcaError::NotPure(eigenvalue));
    }
    Ok(eigenvalue.trailing_zeros() as usize)
}

/// Degeneracy / crowdedness / overlap counts of a hard mapping.
pub fn model_stats(ecmm: &Ecmm) -> Result<ModelStats> {
    let encoding = eigenvalue_encoding(ecmm)?;
    let mut degeneracy: BTreeMap<u64, usize> = BTreeMap::new();
    for &v in &encoding.per_eigenfeature {
        *degeneracy.entry(v).or_insert(0) += 1;
    }
    let l = ecmm.classes();
    let mut crowdedness = vec![0usize; l];
    for row in ecmm.hard.rows() {
        for (k, &bit) in row.iter().enumerate() {
            crowdedness[k] += usize::from(bit);
        }
    }
    let mut overlap_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &o in &ecmm.overlap {
        *overlap_histogram.entry(o as usize).or_insert(0) += 1;
    }
    Ok(ModelStats {
        degeneracy,
        crowdedness,
        overlap_histogram,
    })
}

/// How far the soft mapping sits from a binary matrix.
pub fn soft_stats(soft: &Array2<f64>) -> SoftStats {
    let mut max_entry = 0.0f64;
    let mut dist_sum = 0.0;
    let mut within = 0usize;
    let total = soft.len().max(1);
    for &v in soft.iter() {
        max_entry = max_entry.max(v);
        let d = (v - v.round()).abs();
        dist_sum += d;
        if d <= 0.05 {
            within += 1;
        }
    }
    SoftStats {
        max_entry,
        mean_distance_to_binary: dist_sum / total as f64,
        frac_within_005: within as f64 / total as f64,
    }
}

/// Indices of pure eigenfeatures (overlap degree exactly 1), with the class
/// each one maps to.
pub fn pure_eigenfeatures(ecmm: &Ecmm) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (j, row) in ecmm.hard.rows().into_iter().enumerate() {
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| (b == 1).then_some(k))
            .collect();
        if ones.len() == 1 {
            out.push((j, ones[0]));
        }
    }
    out
}

/// H = P Diag(encoding) P^T, the single combined class-label operator.
pub fn assemble_h(p: &Array2<f64>, encoding: &EigenvalueEncoding) -> Array2<f64> {
    let m = p.nrows();
    assert_eq!(encoding.per_eigenfeature.len(), m);
    let mut scaled = p.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        let lambda = encoding.per_eigenfeature[j] as f64;
        col.mapv_inplace(|v| v * lambda);
    }
    scaled.dot(&p.t())
}

/// Closed-form class-label operator for unambiguous full-rank data:
/// H = X^T Diag(y) X (X^T X)^{-1}.
pub fn analytic_h(x: ArrayView2<f64>, y: &[f64]) -> Result<Array2<f64>> {
    let (n, m) = x.dim();
    let _ = m;
    if y.len() != n {
        return Err(EcaError::DimensionMismatch(format!(
            "{n} rows but {} labels",
            y.len()
        )));
    }
    let xtx = x.t().dot(&x);
    let cond = symmetric_condition(&xtx);
    if !cond.is_finite() || cond > 1e12 {
        return Err(EcaError::SingularMatrix(format!(
            "X^T X condition number {cond:.3e} exceeds 1e12"
        )));
    }
    // X^T Diag(y) X
    let mut weighted = x.to_owned();
    for (i, mut row) in weighted.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * y[i]);
    }
    let lhs = x.t().dot(&weighted);
    // H = lhs (XtX)^{-1}; solve XtX H^T = lhs^T (all symmetric here)
    let ht = spd_solve(&xtx, &lhs.t().as_standard_layout().to_owned())?;
    Ok(ht.t().as_standard_layout().to_owned())
}

/// Rounded expectation of H in state x (half away from zero).
pub fn expectation_predict(x: ArrayView1<f64>, h: &Array2<f64>) -> i64 {
    let hx = h.dot(&x);
    x.dot(&hx).round() as i64
}

/// Coefficients of every sample on the learned basis: row i = x_i^T P.
pub fn basis_transform(x: ArrayView2<f64>, p: &Array2<f64>) -> Array2<f64> {
    x.dot(p)
}

/// Weighted sum of a class's pure eigenfeatures, weights being the mean
/// projection of that class's samples.
pub fn class_reconstruction(data: &Prepared, model: &EcaModel, class: usize) -> Result<Array1<f64>> {
    let ecmm = model.ecmm();
    let pes: Vec<usize> = pure_eigenfeatures(&ecmm)
        .into_iter()
        .filter_map(|(j, k)| (k == class).then_some(j))
        .collect();
    if pes.is_empty() {
        return Err(EcaError::NoPureEigenfeatures(class));
    }
    let rows: Vec<usize> = data
        .y
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| (y == class).then_some(i))
        .collect();
    if rows.is_empty() {
        return Err(EcaError::Config(format!(
            "no samples of class {class} in the dataset"
        )));
    }
    let m = model.m();
    let mut recon = Array1::<f64>::zeros(m);
    for &j in &pes {
        let col = model.p.column(j);
        let mean_proj =
            rows.iter().map(|&i| data.x.row(i).dot(&col)).sum::<f64>() / rows.len() as f64;
        recon.scaled_add(mean_proj, &col);
    }
    Ok(recon)
}

/// Per-class histogram of projections on one eigenfeature.
#[derive(Debug, Clone)]
pub struct ProjectionHistogram {
    pub eigenfeature: usize,
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    /// counts[class][bin]
    pub counts: Vec<Vec<usize>>,
}

pub fn projection_histogram(
    data: &Prepared,
    model: &EcaModel,
    eigenfeature: usize,
    bins: usize,
) -> Result<ProjectionHistogram> {
    if bins < 2 {
        return Err(EcaError::Config("need at least 2 bins".into()));
    }
    if eigenfeature >= model.m() {
        return Err(EcaError::Config(format!(
            "eigenfeature {eigenfeature} out of range (m = {})",
            model.m()
        )));
    }
    let col = model.p.column(eigenfeature);
    let proj: Vec<f64> = data.x.rows().into_iter().map(|r| r.dot(&col)).collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &proj {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(EcaError::Numerical("non-finite projections".into()));
    }
    if hi - lo < 1e-30 {
        hi = lo + 1e-30;
    }
    let mut counts = vec![vec![0usize; bins]; data.classes];
    let width = (hi - lo) / bins as f64;
    for (i, &v) in proj.iter().enumerate() {
        let mut b = ((v - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[data.y[i]][b] += 1;
    }
    Ok(ProjectionHistogram {
        eigenfeature,
        lo,
        hi,
        bins,
        counts,
    })
}

/// CSV for one projection histogram: bin bounds then one count column per
/// class.
pub fn render_histogram_csv(h: &ProjectionHistogram) -> String {
    let mut out = String::from("bin_lo,bin_hi");
    for k in 0..h.counts.len() {
        out.push_str(&format!(",class_{k}"));
    }
    out.push('\n');
    let width = (h.hi - h.lo) / h.bins as f64;
    for b in 0..h.bins {
        out.push_str(&format!(
            "{:.9},{:.9}",
            h.lo + b as f64 * width,
            h.lo + (b + 1) as f64 * width
        ));
        for class_counts in &h.counts {
            out.push_str(&format!(",{}", class_counts[b]));
        }
        out.push('\n');
    }
    out
}

/// The eigenvalue/degeneracy table: eigenvalue, binary form, class label of
/// pure eigenfeatures, degeneracy count. Rows cover every representable
/// eigenvalue when l is small (<= 4 classes), otherwise only observed ones.
pub fn render_degeneracy_table(stats: &ModelStats, classes: usize) -> String {
    let mut out = String::from("eigenvalue,binary,pe_class,degeneracy\n");
    let all: Box<dyn Iterator<Item = u64>> = if classes <= 4 {
        Box::new(0..(1u64 << classes))
    } else {
        Box::new(
            stats
                .degeneracy
                .keys()
                .copied()
                .collect::<Vec<_>>()
                .into_iter(),
        )
    };
    for v in all {
        let count = stats.degeneracy.get(&v).copied().unwrap_or(0);
        let binary: String = (0..classes)
            .rev()
            .map(|k| if (v >> k) & 1 == 1 { '1' } else { '0' })
            .collect();
        let class = pe_class_label(v).map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!("{v},{binary},{class},{count}\n"));
    }
    out
}

/// Stats CSV: crowdedness per class, the overlap histogram and degeneracies.
pub fn render_stats_csv(stats: &ModelStats) -> String {
    let mut out = String::from("kind,key,count\n");
    for (k, c) in stats.crowdedness.iter().enumerate() {
        out.push_str(&format!("crowdedness,{k},{c}\n"));
    }
    for (k, c) in &stats.overlap_histogram {
        out.push_str(&format!("overlap,{k},{c}\n"));
    }
    for (v, c) in &stats.degeneracy {
        out.push_str(&format!("degeneracy,{v},{c}\n"));
    }
    out
}

/// 8-bit binary PGM (P5) after affine min-max scaling to [0, 255].
pub fn write_pgm(path: &Path, values: ArrayView1<f64>, width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(EcaError::DimensionMismatch(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi - lo < 1e-30 { 1.0 } else { hi - lo };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}
