//! Training objectives: the full Bernoulli negative log-likelihood (VECA),
//! the single-term approximation on overlap-normalized probabilities (AECA),
//! mean squared error, and the categorical (row-softmax) variant, together
//! with the orthogonality/binarity/sparsity penalties, hand-derived
//! gradients, and a central finite-difference oracle.
//!
//! Per-sample contributions are evaluated over fixed chunks (see the crate
//! docs) and reduced in index order.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::core::{collapse_matrix, ecmm_soft, EcaModel};
use crate::parallel::map_chunks;
use crate::{EcaError, Result, LOG_EPS};

/// Weights of the penalty terms added to every objective.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyWeights {
    /// Orthogonality weight xi on ||I - P^T P||_F^2.
    pub xi: f64,
    /// Binarity weight gamma on ||1 + cos(2 omega L)||_F^2.
    pub gamma: f64,
    /// Sparsity weight on the soft mapping matrix.
    pub sparsity: f64,
    pub sparsity_kind: SparsityKind,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            xi: 1.0,
            gamma: 0.1,
            sparsity: 0.0,
            sparsity_kind: SparsityKind::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityKind {
    None,
    L1,
    L2,
}

/// Which data term to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Veca,
    Aeca,
    Mse,
    Categorical,
}

/// Gradients of a loss with respect to the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dp: Array2<f64>,
    pub dl: Array2<f64>,
}

/// A labeled mini-batch view: unit-norm rows and class labels.
#[derive(Clone, Copy)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub classes: usize,
}

impl<'a> Batch<'a> {
    pub fn new(x: ArrayView2<'a, f64>, labels: &'a [usize], classes: usize) -> Self {
        assert_eq!(x.nrows(), labels.len(), "batch rows and labels disagree");
        Batch { x, labels, classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0)
}

/// ||I - P^T P||_F^2.
pub fn orthogonality_penalty(p: &Array2<f64>) -> f64 {
    let r = crate::linalg::orthogonality_residual(p);
    r * r
}

/// ||1 + cos(2 omega L)||_F^2; zero exactly where the sinusoid inside the
/// soft mapping sits at an extremum. With omega = 1 this is the plain
/// cos(2L) form.
pub fn binarity_penalty(l: &Array2<f64>, omega: f64) -> f64 {
    l.iter()
        .map(|&v| {
            let t = 1.0 + (2.0 * omega * v).cos();
            t * t
        })
        .sum()
}

/// Sparsity of the soft mapping: mean entry (L1) or squared Frobenius
/// norm (L2).
pub fn sparsity_penalty(soft: &Array2<f64>, kind: SparsityKind) -> f64 {
    match kind {
        SparsityKind::None => 0.0,
        SparsityKind::L1 => soft.mean().unwrap_or(0.0),
        SparsityKind::L2 => soft.iter().map(|v| v * v).sum(),
    }
}

fn penalties(model: &EcaModel, mapping: &Array2<f64>, w: &PenaltyWeights, obj: Objective) -> f64 {
    let mut total = w.xi * orthogonality_penalty(&model.p);
    if obj != Objective::Categorical {
        total += w.gamma * binarity_penalty(&model.l, model.omega);
    }
    if w.sparsity > 0.0 {
        total += w.sparsity * sparsity_penalty(mapping, w.sparsity_kind);
    }
    total
}

/// Row-softmax of L, the categorical mapping.
pub(crate) fn row_softmax(l: &Array2<f64>) -> Array2<f64> {
    let mut out = l.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// The soft mapping actually used by an objective.
fn mapping_for(model: &EcaModel, obj: Objective) -> Array2<f64> {
    match obj {
        Objective::Categorical => row_softmax(&model.l),
        _ => ecmm_soft(&model.l, model.chi, model.omega),
    }
}

/// d soft / d L for the sigmoid-on-sinusoid relaxation:
/// chi * omega * cos(omega L) .* soft .* (1 - soft).
pub(crate) fn soft_mapping_derivative(model: &EcaModel) -> Array2<f64> {
    let soft = ecmm_soft(&model.l, model.chi, model.omega);
    let mut out = soft.clone();
    for ((j, k), v) in out.indexed_iter_mut() {
        let c = (model.omega * model.l[[j, k]]).cos();
        *v = model.chi * model.omega * c * soft[[j, k]] * (1.0 - soft[[j, k]]);
    }
    out
}

/// Per-class probabilities of every row: unmodified p = C M, where C holds
/// squared projections and M is the mapping; the modified variant divides
/// each row of M by its sum first.
fn batch_probabilities(c: &Array2<f64>, mapping: &Array2<f64>, modified: bool) -> Array2<f64> {
    if modified {
        let reweighted = overlap_normalized(mapping);
        c.dot(&reweighted)
    } else {
        c.dot(mapping)
    }
}

fn overlap_normalized(mapping: &Array2<f64>) -> Array2<f64> {
    let mut out = mapping.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s < 1e-12 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / s);
        }
    }
    out
}

struct ChunkOut {
    loss: f64,
    dp: Array2<f64>,
    dmap: Array2<f64>,
    overlap_row_weight: Array1<f64>,
}

/// Loss value of `objective` on a batch, penalties included.
pub fn loss(batch: Batch, model: &EcaModel, w: &PenaltyWeights, objective: Objective) -> f64 {
    loss_scaled(batch, model, w, objective, 1.0)
}

/// Same loss with the data term multiplied by `data_scale`; the trainer uses
/// 1/batch so penalty weights keep a batch-size-independent meaning.
pub(crate) fn loss_scaled(
    batch: Batch,
    model: &EcaModel,
    w: &PenaltyWeights,
    objective: Objective,
    data_scale: f64,
) -> f64 {
    let mapping = mapping_for(model, objective);
    let data: f64 = map_chunks(batch.len(), |(a, b)| {
        chunk_data_loss(batch, model, &mapping, objective, a, b)
    })
    .into_iter()
    .sum();
    data * data_scale + penalties(model, &mapping, w, objective)
}

pub fn veca_loss(batch: Batch, model: &EcaModel, w: &PenaltyWeights) -> f64 {
    loss(batch, model, w, Objective::Veca)
}

pub fn aeca_loss(batch: Batch, model: &EcaModel, w: &PenaltyWeights) -> f64 {
    loss(batch, model, w, Objective::Aeca)
}

pub fn mse_loss(batch: Batch, model: &EcaModel, w: &PenaltyWeights) -> f64 {
    loss(batch, model, w, Objective::Mse)
}

pub fn categorical_loss(batch: Batch, model: &EcaModel, w: &PenaltyWeights) -> f64 {
    loss(batch, model, w, Objective::Categorical)
}

fn chunk_data_loss(
    batch: Batch,
    model: &EcaModel,
    mapping: &Array2<f64>,
    objective: Objective,
    a: usize,
    b: usize,
) -> f64 {
    let x = batch.x.slice(s![a..b, ..]);
    let c = collapse_matrix(x, &model.p);
    let labels = &batch.labels[a..b];
    match objective {
        Objective::Veca => {
            let p = batch_probabilities(&c, mapping, false);
            let complement = mapping.mapv(|v| 1.0 - v);
            let q = c.dot(&complement);
            let mut acc = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..batch.classes {
                    if k == y {
                        acc -= clamp_prob(p[[i, k]]).ln();
                    } else {
                        acc -= clamp_prob(q[[i, k]]).ln();
                    }
                }
            }
            acc
        }
        Objective::Aeca => {
            let p = batch_probabilities(&c, mapping, true);
            labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -clamp_prob(p[[i, y]]).ln())
                .sum()
        }
        Objective::Mse => {
            let p = batch_probabilities(&c, mapping, false);
            let mut acc = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..batch.classes {
                    let t = f64::from(k == y) - p[[i, k]];
                    acc += t * t;
                }
            }
            acc
        }
        Objective::Categorical => {
            let p = batch_probabilities(&c, mapping, false);
            labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -clamp_prob(p[[i, y]]).ln())
                .sum()
        }
    }
}

/// Gradients of the selected loss with respect to P and L, by chain rule
/// through the stated loss (the derivative of a clamped log is zero outside
/// the clamp window, matching what finite differences of the same loss see).
pub fn analytic_gradients(
    batch: Batch,
    model: &EcaModel,
    w: &PenaltyWeights,
    objective: Objective,
) -> Gradients {
    loss_and_gradients(batch, model, w, objective).1
}

/// Loss together with its gradients; the training loop uses this to avoid
/// evaluating twice.
pub fn loss_and_gradients(
    batch: Batch,
    model: &EcaModel,
    w: &PenaltyWeights,
    objective: Objective,
) -> (f64, Gradients) {
    loss_and_gradients_scaled(batch, model, w, objective, 1.0)
}

pub(crate) fn loss_and_gradients_scaled(
    batch: Batch,
    model: &EcaModel,
    w: &PenaltyWeights,
    objective: Objective,
    data_scale: f64,
) -> (f64, Gradients) {
    loss_and_gradients_forced(
        batch,
        model,
        w,
        objective,
        data_scale,
        cfg!(feature = "parallel"),
    )
}

pub(crate) fn loss_and_gradients_forced(
    batch: Batch,
    model: &EcaModel,
    w: &PenaltyWeights,
    objective: Objective,
    data_scale: f64,
    parallel: bool,
) -> (f64, Gradients) {
    let (m, l) = (model.m(), model.classes());
    let mapping = mapping_for(model, objective);
    let reweighted = if objective == Objective::Aeca {
        Some(overlap_normalized(&mapping))
    } else {
        None
    };

    let partials = crate::parallel::map_chunks_forced(
        batch.len(),
        |(a, b)| chunk_gradients(batch, model, &mapping, reweighted.as_ref(), objective, a, b),
        parallel,
    );

    let mut data_loss = 0.0;
    let mut dp = Array2::<f64>::zeros((m, m));
    let mut dmap = Array2::<f64>::zeros((m, l));
    let mut vrow = Array1::<f64>::zeros(m);
    for part in partials {
        data_loss += part.loss;
        dp += &part.dp;
        dmap += &part.dmap;
        vrow += &part.overlap_row_weight;
    }
    if data_scale != 1.0 {
        data_loss *= data_scale;
        dp.mapv_inplace(|v| v * data_scale);
        dmap.mapv_inplace(|v| v * data_scale);
        vrow.mapv_inplace(|v| v * data_scale);
    }

    // AECA: finish d(data)/d(mapping) from the accumulated pieces
    // M/s_j - v_j/s_j^2 per row.
    if objective == Objective::Aeca {
        for j in 0..m {
            let s: f64 = mapping.row(j).sum();
            if s < 1e-12 {
                dmap.row_mut(j).fill(0.0);
                continue;
            }
            let corr = vrow[j] / (s * s);
            for k in 0..l {
                dmap[[j, k]] = dmap[[j, k]] / s - corr;
            }
        }
    }

    // sparsity acts on the soft mapping in use
    if w.sparsity > 0.0 {
        match w.sparsity_kind {
            SparsityKind::None => {}
            SparsityKind::L1 => {
                let g = w.sparsity / (m * l) as f64;
                dmap.mapv_inplace(|v| v + g);
            }
            SparsityKind::L2 => {
                dmap += &mapping.mapv(|v| 2.0 * w.sparsity * v);
            }
        }
    }

    // chain from the mapping back to L
    let mut dl = match objective {
        Objective::Categorical => {
            let mut dl = Array2::<f64>::zeros((m, l));
            for j in 0..m {
                let row = mapping.row(j);
                let inner: f64 = row.iter().zip(dmap.row(j)).map(|(s, g)| s * g).sum();
                for k in 0..l {
                    dl[[j, k]] = row[k] * (dmap[[j, k]] - inner);
                }
            }
            dl
        }
        _ => &dmap * &soft_mapping_derivative(model),
    };

    // penalty gradients
    if w.xi != 0.0 {
        let ptp = model.p.t().dot(&model.p);
        let mut r = -ptp;
        for i in 0..m {
            r[[i, i]] += 1.0;
        }
        dp.scaled_add(-4.0 * w.xi, &model.p.dot(&r));
    }
    if w.gamma != 0.0 && objective != Objective::Categorical {
        let om = model.omega;
        for ((j, k), g) in dl.indexed_iter_mut() {
            let two = 2.0 * om * model.l[[j, k]];
            *g += w.gamma * (-4.0 * om) * (1.0 + two.cos()) * two.sin();
        }
    }

    let total = data_loss + penalties(model, &mapping, w, objective);
    (total, Gradients { dp, dl })
}

fn chunk_gradients(
    batch: Batch,
    model: &EcaModel,
    mapping: &Array2<f64>,
    reweighted: Option<&Array2<f64>>,
    objective: Objective,
    lo: usize,
    hi: usize,
) -> ChunkOut {
    let x = batch.x.slice(s![lo..hi, ..]);
    let labels = &batch.labels[lo..hi];
    let n = hi - lo;
    let lcls = batch.classes;
    let m = model.m();

    let proj = x.dot(&model.p);
    let c = proj.mapv(|v| v * v);

    // A = d(data)/d(p), B = d(data)/d(q) for the complement probabilities
    let mut a = Array2::<f64>::zeros((n, lcls));
    let mut loss = 0.0;

    let g; // d(data)/dC
    let mut dmap;
    let mut vrow = Array1::<f64>::zeros(m);

    match objective {
        Objective::Veca => {
            let p = c.dot(mapping);
            let complement = mapping.mapv(|v| 1.0 - v);
            let q = c.dot(&complement);
            let mut b = Array2::<f64>::zeros((n, lcls));
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..lcls {
                    if k == y {
                        let pv = p[[i, k]];
                        loss -= clamp_prob(pv).ln();
                        if (LOG_EPS..=1.0).contains(&pv) {
                            a[[i, k]] = -1.0 / pv;
                        }
                    } else {
                        let qv = q[[i, k]];
                        loss -= clamp_prob(qv).ln();
                        if (LOG_EPS..=1.0).contains(&qv) {
                            b[[i, k]] = -1.0 / qv;
                        }
                    }
                }
            }
            let ct = c.t();
            dmap = ct.dot(&a);
            dmap -= &ct.dot(&b);
            g = a.dot(&mapping.t()) + b.dot(&complement.t());
        }
        Objective::Aeca => {
            let r = reweighted.expect("aeca reweighted mapping");
            let p = c.dot(r);
            for (i, &y) in labels.iter().enumerate() {
                let pv = p[[i, y]];
                loss -= clamp_prob(pv).ln();
                if (LOG_EPS..=1.0).contains(&pv) {
                    a[[i, y]] = -1.0 / pv;
                }
            }
            // dmap accumulates M = C^T A; the row correction v_j sums
            // c_ij * (A L)_ij over the chunk.
            dmap = c.t().dot(&a);
            let al = a.dot(&mapping.t());
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..n {
                    s += c[[i, j]] * al[[i, j]];
                }
                vrow[j] = s;
            }
            g = a.dot(&r.t());
        }
        Objective::Mse => {
            let p = c.dot(mapping);
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..lcls {
                    let t = f64::from(k == y) - p[[i, k]];
                    loss += t * t;
                    a[[i, k]] = -2.0 * t;
                }
            }
            dmap = c.t().dot(&a);
            g = a.dot(&mapping.t());
        }
        Objective::Categorical => {
            let p = c.dot(mapping);
            for (i, &y) in labels.iter().enumerate() {
                let pv = p[[i, y]];
                loss -= clamp_prob(pv).ln();
                if (LOG_EPS..=1.0).contains(&pv) {
                    a[[i, y]] = -1.0 / pv;
                }
            }
            dmap = c.t().dot(&a);
            g = a.dot(&mapping.t());
        }
    }

    // dC flows into P through c_ij = (x_i . P_j)^2
    let gp = &g * &proj;
    let dp = x.t().dot(&gp) * 2.0;

    ChunkOut {
        loss,
        dp,
        dmap,
        overlap_row_weight: vrow,
    }
}

/// Central finite differences of the selected loss over every parameter.
/// Independent of the analytic gradient path; the ground truth the analytic
/// rules are checked against.
pub fn finite_difference_gradients(
    batch: Batch,
    model: &EcaModel,
    w: &PenaltyWeights,
    objective: Objective,
    h: f64,
) -> Result<Gradients> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(EcaError::Config(format!("step h={h} outside (0, 1e-2]")));
    }
    let mut work = model.clone();
    let (m, l) = (model.m(), model.classes());
    let mut dp = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let orig = work.p[[i, j]];
            work.p[[i, j]] = orig + h;
            let fp = loss(batch, &work, w, objective);
            work.p[[i, j]] = orig - h;
            let fm = loss(batch, &work, w, objective);
            work.p[[i, j]] = orig;
            dp[[i, j]] = (fp - fm) / (2.0 * h);
        }
    }
    let mut dl = Array2::<f64>::zeros((m, l));
    for i in 0..m {
        for j in 0..l {
            let orig = work.l[[i, j]];
            work.l[[i, j]] = orig + h;
            let fp = loss(batch, &work, w, objective);
            work.l[[i, j]] = orig - h;
            let fm = loss(batch, &work, w, objective);
            work.l[[i, j]] = orig;
            dl[[i, j]] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(Gradients { dp, dl })
}

/// Central difference of a scalar function.
#[cfg(test)]
pub(crate) fn central_diff<F: Fn(f64) -> f64>(f: F, at: f64, h: f64) -> f64 {
    (f(at + h) - f(at - h)) / (2.0 * h)
}

/// Normalized worst-case disagreement between two gradient sets, used by the
/// gradient-correctness checks: max |a - f| scaled by the oracle magnitude.
pub fn gradient_disagreement(a: &Gradients, f: &Gradients) -> f64 {
    fn one(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = 1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        a.iter()
            .zip(b.iter())
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
            / scale
    }
    one(&a.dp, &f.dp).max(one(&a.dl, &f.dl))
}

/// Sum of per-class one-hot rows; a helper for tests and reports.
#[cfg(test)]
pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::stacked_pmf;
    use crate::linalg::{orthogonality_residual, qr_orthogonal};
    use crate::rng::{derive_rng, standard_normal, uniform_in};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    const OMEGA: f64 = std::f64::consts::FRAC_PI_2;

    fn random_instance(m: usize, l: usize, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>, EcaModel) {
        let mut rng = derive_rng(seed, "objective-test");
        let mut x = Array2::from_shape_fn((n, m), |_| standard_normal(&mut rng));
        for mut row in x.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        let labels: Vec<usize> = (0..n).map(|i| i % l).collect();
        let p = Array2::from_shape_fn((m, m), |_| standard_normal(&mut rng));
        let lmat = Array2::from_shape_fn((m, l), |_| uniform_in(&mut rng, -0.5, 0.5));
        let model = EcaModel::new(p, lmat, 3.0, OMEGA).unwrap();
        (x, labels, model)
    }

    fn orthonormal_instance(m: usize, l: usize, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>, EcaModel) {
        let (x, labels, mut model) = random_instance(m, l, n, seed);
        model.p = qr_orthogonal(&model.p);
        (x, labels, model)
    }

    fn zero_weights() -> PenaltyWeights {
        PenaltyWeights {
            xi: 0.0,
            gamma: 0.0,
            sparsity: 0.0,
            sparsity_kind: SparsityKind::None,
        }
    }

    #[test]
    fn penalty_examples() {
        let p = qr_orthogonal(&array![[1.0, 2.0], [0.5, -1.0]]);
        assert!(orthogonality_penalty(&p) < 1e-24);

        // with the plain cos(2L) form (omega = 1) the penalty vanishes at pi/2
        let l = Array2::from_elem((3, 2), std::f64::consts::FRAC_PI_2);
        assert!(binarity_penalty(&l, 1.0) < 1e-24);

        let l = Array2::<f64>::zeros((4, 3));
        assert_abs_diff_eq!(binarity_penalty(&l, OMEGA), 4.0 * 12.0, epsilon = 1e-12);
    }

    #[test]
    fn veca_perfect_fit_has_vanishing_data_term() {
        // identity P, mapping exactly separating; the sample sits on its class
        // eigenfeature
        let p = Array2::<f64>::eye(2);
        // L at the sinusoid extrema: soft mapping ~ binary I
        let big = std::f64::consts::PI / (2.0 * OMEGA);
        let lmat = array![[big, -big], [-big, big]];
        let model = EcaModel::new(p, lmat, 40.0, OMEGA).unwrap();
        let x = array![[1.0, 0.0]];
        let batch = Batch::new(x.view(), &[0], 2);
        let data = veca_loss(batch, &model, &zero_weights());
        assert!(data.abs() <= 3e-12, "data term {data}");
    }

    #[test]
    fn veca_binarity_floor_at_l_zero() {
        let (x, labels, mut model) = orthonormal_instance(3, 2, 4, 1);
        model.l.fill(0.0);
        let w = PenaltyWeights {
            xi: 0.0,
            gamma: 0.7,
            sparsity: 0.0,
            sparsity_kind: SparsityKind::None,
        };
        let batch = Batch::new(x.view(), &labels, 2);
        let with_pen = veca_loss(batch, &model, &w);
        let without = veca_loss(batch, &model, &zero_weights());
        assert_abs_diff_eq!(with_pen - without, 0.7 * 4.0 * 6.0, epsilon = 1e-9);
    }

    #[test]
    fn veca_matches_trace_form_oracle() {
        // independent recomputation through stacked PMFs: for orthonormal P
        // the complement route equals 1 - p, so the data term equals
        // -sum_i Tr(Y_i^T log PMF_i)
        let (x, labels, model) = orthonormal_instance(5, 3, 8, 2);
        let batch = Batch::new(x.view(), &labels, 3);
        let data = veca_loss(batch, &model, &zero_weights());

        let mut oracle = 0.0;
        let soft = ecmm_soft(&model.l, model.chi, model.omega);
        for (i, &y) in labels.iter().enumerate() {
            let c = crate::core::collapse_probabilities(x.row(i), &model.p);
            let p = c.dot(&soft);
            let pmf = stacked_pmf(p.view());
            let yv = one_hot(&[y], 3);
            // Tr(Y^T log PMF) with Y = [y, 1-y]
            for k in 0..3 {
                let want1 = yv[[0, k]];
                oracle -= want1 * clamp_prob(pmf[[k, 0]]).ln();
                oracle -= (1.0 - want1) * clamp_prob(pmf[[k, 1]]).ln();
            }
        }
        assert_abs_diff_eq!(data, oracle, epsilon = 1e-9);
    }

    #[test]
    fn aeca_examples() {
        // modified p_true = 1 gives a vanishing data term
        let p = Array2::<f64>::eye(2);
        let big = std::f64::consts::PI / (2.0 * OMEGA);
        let lmat = array![[big, -big], [-big, big]];
        let model = EcaModel::new(p, lmat, 40.0, OMEGA).unwrap();
        let x = array![[1.0, 0.0]];
        let data = aeca_loss(Batch::new(x.view(), &[0], 2), &model, &zero_weights());
        assert!(data.abs() < 1e-7, "data {data}");

        // all-ones mapping: modified probabilities are uniform, so the data
        // term is log(l) per sample
        let (x, labels, mut model) = orthonormal_instance(4, 3, 6, 3);
        model.l.fill(big);
        model.chi = 40.0;
        let data = aeca_loss(Batch::new(x.view(), &labels, 3), &model, &zero_weights());
        assert_abs_diff_eq!(data, 6.0 * 3.0f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn aeca_data_term_never_exceeds_veca() {
        for seed in 0..20 {
            let (x, labels, model) = orthonormal_instance(5, 3, 6, 100 + seed);
            let batch = Batch::new(x.view(), &labels, 3);
            let a = aeca_loss(batch, &model, &zero_weights());
            let v = veca_loss(batch, &model, &zero_weights());
            assert!(a <= v + 1e-9, "seed {seed}: aeca {a} > veca {v}");
        }
    }

    #[test]
    fn mse_examples() {
        let p = Array2::<f64>::eye(2);
        let big = std::f64::consts::PI / (2.0 * OMEGA);
        let lmat = array![[big, -big], [-big, big]];
        let model = EcaModel::new(p, lmat, 40.0, OMEGA).unwrap();
        let x = array![[1.0, 0.0]];
        let data = mse_loss(Batch::new(x.view(), &[0], 2), &model, &zero_weights());
        assert!(data < 1e-14, "perfect prediction data {data}");

        // all-zero probabilities against a one-hot target scores 1 per sample
        let lmat = array![[-big, -big], [-big, -big]];
        let model = EcaModel::new(Array2::eye(2), lmat, 40.0, OMEGA).unwrap();
        let data = mse_loss(Batch::new(x.view(), &[0], 2), &model, &zero_weights());
        assert_abs_diff_eq!(data, 1.0, epsilon = 1e-7);

        // elementwise oracle on random inputs
        let (x, labels, model) = random_instance(4, 2, 5, 4);
        let batch = Batch::new(x.view(), &labels, 2);
        let data = mse_loss(batch, &model, &zero_weights());
        let soft = ecmm_soft(&model.l, model.chi, model.omega);
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let c = crate::core::collapse_probabilities(x.row(i), &model.p);
            let p = c.dot(&soft);
            for k in 0..2 {
                let t = f64::from(k == y) - p[k];
                oracle += t * t;
            }
        }
        assert_abs_diff_eq!(data, oracle, epsilon = 1e-10);
    }

    #[test]
    fn categorical_examples() {
        // equal row entries soften to uniform
        let l = Array2::<f64>::zeros((3, 4));
        let sm = row_softmax(&l);
        assert!(sm.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // single class: softmax is 1 and the data term vanishes
        let (x, _, mut model) = orthonormal_instance(3, 1, 4, 5);
        model.l = Array2::zeros((3, 1));
        let labels = vec![0usize; 4];
        let data = categorical_loss(Batch::new(x.view(), &labels, 1), &model, &zero_weights());
        assert!(data.abs() < 1e-9, "single-class data {data}");

        // oracle with independently computed softmax
        let (x, labels, model) = random_instance(4, 3, 5, 6);
        let data = categorical_loss(Batch::new(x.view(), &labels, 3), &model, &zero_weights());
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let c = crate::core::collapse_probabilities(x.row(i), &model.p);
            let mut num = vec![0.0; 3];
            for j in 0..4 {
                let row = model.l.row(j);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                for k in 0..3 {
                    num[k] += c[j] * exps[k] / s;
                }
            }
            oracle -= clamp_prob(num[y]).ln();
        }
        assert_abs_diff_eq!(data, oracle, epsilon = 1e-9);
    }

    #[test]
    fn chain_factor_at_zero() {
        let model = EcaModel::new(
            Array2::eye(3),
            Array2::zeros((3, 2)),
            7.0,
            OMEGA,
        )
        .unwrap();
        let d = soft_mapping_derivative(&model);
        for &v in d.iter() {
            assert_abs_diff_eq!(v, 7.0 * OMEGA / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_central_diff_is_exact() {
        let g = central_diff(|t| t * t, 1.0, 1e-5);
        assert!((g - 2.0).abs() < 1e-9, "got {g}");
    }

    #[test]
    fn gradients_match_finite_differences_all_objectives() {
        let w = PenaltyWeights {
            xi: 0.8,
            gamma: 0.3,
            sparsity: 0.05,
            sparsity_kind: SparsityKind::L2,
        };
        for (seed, obj) in [
            (11, Objective::Veca),
            (12, Objective::Aeca),
            (13, Objective::Mse),
            (14, Objective::Categorical),
        ] {
            let (x, labels, model) = random_instance(5, 3, 4, seed);
            let batch = Batch::new(x.view(), &labels, 3);
            let analytic = analytic_gradients(batch, &model, &w, obj);
            let fd = finite_difference_gradients(batch, &model, &w, obj, 1e-5).unwrap();
            let err = gradient_disagreement(&analytic, &fd);
            assert!(err < 1e-4, "{obj:?}: disagreement {err}");
        }
    }

    #[test]
    fn penalty_only_gradient_matches_closed_form() {
        let (x, labels, model) = random_instance(4, 2, 0, 21);
        let batch = Batch::new(x.view(), &labels, 2);
        let w = PenaltyWeights {
            xi: 1.3,
            gamma: 0.0,
            sparsity: 0.0,
            sparsity_kind: SparsityKind::None,
        };
        let analytic = analytic_gradients(batch, &model, &w, Objective::Veca);
        // closed form: -4 xi P (I - P^T P)
        let ptp = model.p.t().dot(&model.p);
        let mut r = -ptp;
        for i in 0..4 {
            r[[i, i]] += 1.0;
        }
        let closed = model.p.dot(&r) * (-4.0 * 1.3);
        for (a, c) in analytic.dp.iter().zip(closed.iter()) {
            assert_abs_diff_eq!(a, c, epsilon = 1e-12);
        }
        let fd = finite_difference_gradients(batch, &model, &w, Objective::Veca, 1e-5).unwrap();
        assert!(gradient_disagreement(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn penalties_alone_are_minimized_at_orthogonality_and_binarity() {
        // run the optimizer on the penalty terms only and check both residuals
        let (x, labels, mut model) = random_instance(4, 3, 0, 22);
        let batch = Batch::new(x.view(), &labels, 3);
        let w = PenaltyWeights {
            xi: 1.0,
            gamma: 1.0,
            sparsity: 0.0,
            sparsity_kind: SparsityKind::None,
        };
        // decaying step sizes settle the minima to floating-point depth
        for (lr, steps) in [(0.05, 2000), (1e-3, 2000), (1e-5, 2000)] {
            let mut opt = crate::trainer::Adam::new(&[model.p.dim(), model.l.dim()], lr);
            for _ in 0..steps {
                let (_, grad) = loss_and_gradients(batch, &model, &w, Objective::Veca);
                opt.step(&mut [&mut model.p, &mut model.l], &[&grad.dp, &grad.dl]);
            }
        }
        assert!(
            orthogonality_residual(&model.p) < 1e-6,
            "orthogonality residual {}",
            orthogonality_residual(&model.p)
        );
        let bin = binarity_penalty(&model.l, model.omega).sqrt();
        assert!(bin < 1e-6, "binarity residual {bin}");
    }

    #[test]
    fn small_steps_decrease_loss() {
        for seed in 0..10 {
            let (x, labels, model) = random_instance(4, 2, 6, 40 + seed);
            let batch = Batch::new(x.view(), &labels, 2);
            let w = PenaltyWeights::default();
            let (before, grad) = loss_and_gradients(batch, &model, &w, Objective::Veca);
            let mut lr = 1e-3;
            let mut ok = false;
            for _ in 0..12 {
                let mut trial = model.clone();
                trial.p.scaled_add(-lr, &grad.dp);
                trial.l.scaled_add(-lr, &grad.dl);
                if veca_loss(batch, &trial, &w) < before {
                    ok = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(ok, "seed {seed}: no descent step found");
        }
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let (x, labels, model) = random_instance(3, 2, 2, 60);
        let batch = Batch::new(x.view(), &labels, 2);
        assert!(finite_difference_gradients(batch, &model, &PenaltyWeights::default(), Objective::Veca, 0.5).is_err());
    }

    #[test]
    fn losses_stay_finite_at_probability_extremes() {
        // mapping saturated to exact certainty, input on an eigenfeature:
        // p hits 1 and the complement hits 0; clamping keeps every loss finite
        let p = Array2::<f64>::eye(2);
        let big = std::f64::consts::PI / (2.0 * OMEGA);
        let lmat = array![[big, big], [big, big]];
        let model = EcaModel::new(p, lmat, 600.0, OMEGA).unwrap();
        let x = array![[1.0, 0.0]];
        let batch = Batch::new(x.view(), &[0], 2);
        let w = PenaltyWeights::default();
        for obj in [Objective::Veca, Objective::Aeca, Objective::Mse, Objective::Categorical] {
            let v = loss(batch, &model, &w, obj);
            assert!(v.is_finite(), "{obj:?} loss {v}");
        }
    }

    #[test]
    fn axis_sums_helper_is_consistent() {
        // one_hot rows sum to 1
        let y = one_hot(&[0, 2, 1], 3);
        for row in y.axis_iter(ndarray::Axis(0)) {
            assert_eq!(row.sum(), 1.0);
        }
    }
}
