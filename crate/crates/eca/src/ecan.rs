//! ECAN: sequential networks of ECA folds joined by dimension operators.
//! Each fold applies its operator, renormalizes the state, projects through
//! its own eigenfeature matrix and emits class probabilities; the joint
//! objective is a pi-weighted sum of per-fold terms and every parameter is
//! trained end to end with a hand-derived backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use std::fs;
use std::path::Path;

use crate::core::{ecmm_soft, EcaModel};
use crate::data::Prepared;
use crate::model_io::{self, JsonWriter};
use crate::objectives::{soft_mapping_derivative, Batch, PenaltyWeights};
use crate::parallel::map_chunks;
use crate::rng::{derive_rng, standard_normal, uniform_in};
use crate::trainer::{cosine_lr, effective_batch_size, init_model, Optimizer, TrainConfig};
use crate::{EcaError, Result, LOG_EPS};

/// What a dimension operator does between folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimOpKind {
    Identity,
    /// nearest-neighbor re-gridding of square images
    Resize,
    /// append sqrt(A'(1; x.^2)) below the untouched input
    QuadRaise,
    /// replace the state by sqrt(D'(1; x.^2))
    QuadReduce,
    /// append max(0, W(1; x)) below the untouched input
    RectRaise,
    /// replace the state by max(0, W(1; x))
    RectReduce,
    /// plain affine layer W(1; x)
    Dense,
}

impl DimOpKind {
    pub fn name(&self) -> &'static str {
        match self {
            DimOpKind::Identity => "identity",
            DimOpKind::Resize => "resize",
            DimOpKind::QuadRaise => "quad_raise",
            DimOpKind::QuadReduce => "quad_reduce",
            DimOpKind::RectRaise => "rect_raise",
            DimOpKind::RectReduce => "rect_reduce",
            DimOpKind::Dense => "dense",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "identity" => DimOpKind::Identity,
            "resize" => DimOpKind::Resize,
            "quad_raise" => DimOpKind::QuadRaise,
            "quad_reduce" => DimOpKind::QuadReduce,
            "rect_raise" => DimOpKind::RectRaise,
            "rect_reduce" => DimOpKind::RectReduce,
            "dense" => DimOpKind::Dense,
            other => {
                return Err(EcaError::Config(format!(
                    "unknown dimension operator '{other}'"
                )))
            }
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, DimOpKind::Identity)
    }
}

/// One dimension operator with (for the trainable kinds) its weights.
#[derive(Debug, Clone)]
pub struct DimensionOperator {
    pub kind: DimOpKind,
    pub weights: Option<Array2<f64>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DimensionOperator {
    pub fn identity(dim: usize) -> Self {
        DimensionOperator {
            kind: DimOpKind::Identity,
            weights: None,
            in_dim: dim,
            out_dim: dim,
        }
    }

    /// Expected weight shape per kind; None for the non-trainable kinds.
    fn weight_shape(kind: DimOpKind, in_dim: usize, out_dim: usize) -> Option<(usize, usize)> {
        match kind {
            DimOpKind::Identity | DimOpKind::Resize => None,
            DimOpKind::QuadRaise | DimOpKind::RectRaise => Some((out_dim - in_dim, in_dim + 1)),
            DimOpKind::QuadReduce | DimOpKind::RectReduce | DimOpKind::Dense => {
                Some((out_dim, in_dim + 1))
            }
        }
    }

    pub fn new(
        kind: DimOpKind,
        in_dim: usize,
        out_dim: usize,
        weights: Option<Array2<f64>>,
    ) -> Result<Self> {
        match kind {
            DimOpKind::Identity => {
                if in_dim != out_dim {
                    return Err(EcaError::Architecture(format!(
                        "identity operator must keep the dimension ({in_dim} != {out_dim})"
                    )));
                }
            }
            DimOpKind::Resize => {
                let from = (in_dim as f64).sqrt().round() as usize;
                let to = (out_dim as f64).sqrt().round() as usize;
                if from * from != in_dim || to * to != out_dim {
                    return Err(EcaError::Architecture(format!(
                        "resize expects square image dimensions, got {in_dim} -> {out_dim}"
                    )));
                }
            }
            DimOpKind::QuadRaise | DimOpKind::RectRaise => {
                if out_dim <= in_dim {
                    return Err(EcaError::Architecture(format!(
                        "{} must raise the dimension ({in_dim} -> {out_dim})",
                        kind.name()
                    )));
                }
            }
            DimOpKind::QuadReduce | DimOpKind::RectReduce => {
                if out_dim >= in_dim {
                    return Err(EcaError::Architecture(format!(
                        "{} must reduce the dimension ({in_dim} -> {out_dim})",
                        kind.name()
                    )));
                }
            }
            DimOpKind::Dense => {}
        }
        if let Some(shape) = Self::weight_shape(kind, in_dim, out_dim) {
            let w = weights.as_ref().ok_or_else(|| {
                EcaError::Architecture(format!("{} needs a weight matrix", kind.name()))
            })?;
            if w.dim() != shape {
                return Err(EcaError::Architecture(format!(
                    "{} weights must be {}x{}, got {}x{}",
                    kind.name(),
                    shape.0,
                    shape.1,
                    w.nrows(),
                    w.ncols()
                )));
            }
            if matches!(kind, DimOpKind::QuadRaise | DimOpKind::QuadReduce)
                && w.iter().any(|&v| v < 0.0)
            {
                return Err(EcaError::Architecture(format!(
                    "{} weights must be nonnegative",
                    kind.name()
                )));
            }
        } else if weights.is_some() {
            return Err(EcaError::Architecture(format!(
                "{} takes no weights",
                kind.name()
            )));
        }
        Ok(DimensionOperator {
            kind,
            weights,
            in_dim,
            out_dim,
        })
    }

    /// Seeded initialization of the trainable kinds: Uniform(0, 0.1) for
    /// quadratic weights (nonnegativity preserved by projection after every
    /// step), normal / sqrt(fan_in) for rectified and dense layers.
    pub fn init(
        kind: DimOpKind,
        in_dim: usize,
        out_dim: usize,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Result<Self> {
        let weights = Self::weight_shape(kind, in_dim, out_dim).map(|shape| match kind {
            DimOpKind::QuadRaise | DimOpKind::QuadReduce => {
                Array2::from_shape_fn(shape, |_| uniform_in(rng, 0.0, 0.1))
            }
            _ => {
                // positive biases keep early rectified states alive
                let scale = 1.0 / (in_dim as f64).sqrt();
                Array2::from_shape_fn(shape, |(_, c)| {
                    if c == 0 {
                        0.1
                    } else {
                        scale * standard_normal(rng)
                    }
                })
            }
        });
        Self::new(kind, in_dim, out_dim, weights)
    }
}

/// Apply a dimension operator to one vector.
pub fn apply_dim_op(op: &DimensionOperator, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != op.in_dim {
        return Err(EcaError::DimensionMismatch(format!(
            "operator expects {} inputs, got {}",
            op.in_dim,
            x.len()
        )));
    }
    Ok(forward_op(op, x).0)
}

/// Forward pass keeping the pre-activation needed by the backward pass.
fn forward_op(op: &DimensionOperator, x: ArrayView1<f64>) -> (Array1<f64>, Option<Array1<f64>>) {
    match op.kind {
        DimOpKind::Identity => (x.to_owned(), None),
        DimOpKind::Resize => {
            let from = (op.in_dim as f64).sqrt().round() as usize;
            let to = (op.out_dim as f64).sqrt().round() as usize;
            let mut out = Array1::<f64>::zeros(op.out_dim);
            for r in 0..to {
                for c in 0..to {
                    let sr = (r * from) / to;
                    let sc = (c * from) / to;
                    out[r * to + c] = x[sr * from + sc];
                }
            }
            (out, None)
        }
        DimOpKind::QuadRaise | DimOpKind::QuadReduce => {
            let w = op.weights.as_ref().expect("validated");
            let extra = w.nrows();
            let mut pre = Array1::<f64>::zeros(extra);
            for r in 0..extra {
                let mut acc = w[[r, 0]];
                for j in 0..op.in_dim {
                    acc += w[[r, j + 1]] * x[j] * x[j];
                }
                // weights are projected nonnegative, so the radicand cannot
                // go negative; guard the sqrt anyway
                debug_assert!(acc >= -1e-12, "negative radicand {acc}");
                pre[r] = acc.max(0.0);
            }
            let root = pre.mapv(f64::sqrt);
            let out = if op.kind == DimOpKind::QuadRaise {
                let mut out = Array1::<f64>::zeros(op.out_dim);
                out.slice_mut(s![..op.in_dim]).assign(&x);
                out.slice_mut(s![op.in_dim..]).assign(&root);
                out
            } else {
                root
            };
            (out, Some(pre))
        }
        DimOpKind::RectRaise | DimOpKind::RectReduce | DimOpKind::Dense => {
            let w = op.weights.as_ref().expect("validated");
            let rows = w.nrows();
            let mut pre = Array1::<f64>::zeros(rows);
            for r in 0..rows {
                let mut acc = w[[r, 0]];
                for j in 0..op.in_dim {
                    acc += w[[r, j + 1]] * x[j];
                }
                pre[r] = acc;
            }
            let active = match op.kind {
                DimOpKind::Dense => pre.clone(),
                _ => pre.mapv(|v| v.max(0.0)),
            };
            let out = if op.kind == DimOpKind::RectRaise {
                let mut out = Array1::<f64>::zeros(op.out_dim);
                out.slice_mut(s![..op.in_dim]).assign(&x);
                out.slice_mut(s![op.in_dim..]).assign(&active);
                out
            } else {
                active
            };
            (out, Some(pre))
        }
    }
}

/// Backward through one operator for one sample: fills the input gradient
/// and accumulates the weight gradient.
#[allow(clippy::too_many_arguments)]
fn backward_op(
    op: &DimensionOperator,
    x: ArrayView1<f64>,
    pre: Option<&Array1<f64>>,
    dout: ArrayView1<f64>,
    dx: &mut Array1<f64>,
    dw: Option<&mut Array2<f64>>,
) {
    match op.kind {
        DimOpKind::Identity => dx.assign(&dout),
        DimOpKind::Resize => {
            let from = (op.in_dim as f64).sqrt().round() as usize;
            let to = (op.out_dim as f64).sqrt().round() as usize;
            dx.fill(0.0);
            for r in 0..to {
                for c in 0..to {
                    let sr = (r * from) / to;
                    let sc = (c * from) / to;
                    dx[sr * from + sc] += dout[r * to + c];
                }
            }
        }
        DimOpKind::QuadRaise | DimOpKind::QuadReduce => {
            let w = op.weights.as_ref().expect("validated");
            let dw = dw.expect("trainable");
            let pre = pre.expect("trace");
            let extra = w.nrows();
            let (pass, dextra) = if op.kind == DimOpKind::QuadRaise {
                (true, dout.slice(s![op.in_dim..]))
            } else {
                (false, dout.slice(s![..]))
            };
            if pass {
                dx.assign(&dout.slice(s![..op.in_dim]));
            } else {
                dx.fill(0.0);
            }
            for r in 0..extra {
                let root = pre[r].sqrt();
                if root < 1e-9 {
                    continue; // flat at the clamp
                }
                let du = dextra[r] / (2.0 * root);
                dw[[r, 0]] += du;
                for j in 0..op.in_dim {
                    dw[[r, j + 1]] += du * x[j] * x[j];
                    dx[j] += du * w[[r, j + 1]] * 2.0 * x[j];
                }
            }
        }
        DimOpKind::RectRaise | DimOpKind::RectReduce | DimOpKind::Dense => {
            let w = op.weights.as_ref().expect("validated");
            let dw = dw.expect("trainable");
            let pre = pre.expect("trace");
            let (pass, dextra) = if op.kind == DimOpKind::RectRaise {
                (true, dout.slice(s![op.in_dim..]))
            } else {
                (false, dout.slice(s![..]))
            };
            if pass {
                dx.assign(&dout.slice(s![..op.in_dim]));
            } else {
                dx.fill(0.0);
            }
            for r in 0..w.nrows() {
                let gate = match op.kind {
                    DimOpKind::Dense => true,
                    _ => pre[r] > 0.0,
                };
                if !gate {
                    continue;
                }
                let dpre = dextra[r];
                dw[[r, 0]] += dpre;
                for j in 0..op.in_dim {
                    dw[[r, j + 1]] += dpre * x[j];
                    dx[j] += dpre * w[[r, j + 1]];
                }
            }
        }
    }
}

/// One fold: a dimension operator feeding an ECA model.
#[derive(Debug, Clone)]
pub struct Fold {
    pub op: DimensionOperator,
    pub eca: EcaModel,
}

/// A sequential multi-fold network with per-fold loss weights pi.
#[derive(Debug, Clone)]
pub struct EcanModel {
    pub folds: Vec<Fold>,
    pub pi: Vec<f64>,
}

impl EcanModel {
    pub fn new(folds: Vec<Fold>, pi: Vec<f64>) -> Result<Self> {
        if folds.is_empty() {
            return Err(EcaError::Architecture("need at least one fold".into()));
        }
        if pi.len() != folds.len() {
            return Err(EcaError::Architecture(format!(
                "{} pi weights for {} folds",
                pi.len(),
                folds.len()
            )));
        }
        if pi.iter().any(|&v| v < 0.0) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EcaError::Architecture(
                "pi must be nonnegative and sum to 1".into(),
            ));
        }
        let classes = folds[0].eca.classes();
        for (t, fold) in folds.iter().enumerate() {
            if fold.op.out_dim != fold.eca.m() {
                return Err(EcaError::Architecture(format!(
                    "fold {t}: operator emits {} dims but the fold projects {}",
                    fold.op.out_dim,
                    fold.eca.m()
                )));
            }
            if fold.eca.classes() != classes {
                return Err(EcaError::Architecture(format!(
                    "fold {t}: class count {} differs from fold 0 ({classes})",
                    fold.eca.classes()
                )));
            }
            if t > 0 {
                if fold.op.in_dim != folds[t - 1].eca.m() {
                    return Err(EcaError::Architecture(format!(
                        "fold {t}: operator consumes {} dims but fold {} emits {}",
                        fold.op.in_dim,
                        t - 1,
                        folds[t - 1].eca.m()
                    )));
                }
                if !fold.op.kind.is_identity() && !folds[t - 1].op.kind.is_identity() {
                    return Err(EcaError::Architecture(format!(
                        "folds {} and {t} both carry non-identity operators; alternate with identity",
                        t - 1
                    )));
                }
            }
        }
        Ok(EcanModel { folds, pi })
    }

    pub fn with_uniform_pi(folds: Vec<Fold>) -> Result<Self> {
        let tau = folds.len().max(1);
        let mut pi = vec![1.0 / tau as f64; tau];
        let gap = 1.0 - pi.iter().sum::<f64>();
        pi[0] += gap;
        Self::new(folds, pi)
    }

    pub fn input_dim(&self) -> usize {
        self.folds[0].op.in_dim
    }

    pub fn classes(&self) -> usize {
        self.folds[0].eca.classes()
    }
}

/// Per-fold output of the forward pass.
#[derive(Debug, Clone)]
pub struct FoldOutput {
    /// coefficient vector g_t
    pub coefficients: Array1<f64>,
    /// overlap-normalized class probabilities of this fold
    pub probabilities: Array1<f64>,
}

/// Forward pass of one raw input: each fold applies its operator,
/// renormalizes, projects and emits probabilities. The prediction is the
/// argmax of the last fold's probabilities.
pub fn ecan_forward(model: &EcanModel, x_raw: ArrayView1<f64>) -> Result<Vec<FoldOutput>> {
    if x_raw.len() != model.input_dim() {
        return Err(EcaError::DimensionMismatch(format!(
            "input has {} dims, network expects {}",
            x_raw.len(),
            model.input_dim()
        )));
    }
    let mut state = x_raw.to_owned();
    let mut outputs = Vec::with_capacity(model.folds.len());
    for (t, fold) in model.folds.iter().enumerate() {
        let (v, _) = forward_op(&fold.op, state.view());
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EcaError::ZeroVector(format!(
                "fold {t}: dimension operator annihilated the state"
            )));
        }
        let xhat = v.mapv(|a| a / norm);
        let g = fold.eca.p.t().dot(&xhat);
        let c = g.mapv(|a| a * a);
        let ecmm = fold.eca.ecmm();
        let probs = crate::core::class_probabilities_from(c.view(), &ecmm, crate::core::PmfMode::Modified);
        outputs.push(FoldOutput {
            coefficients: g.clone(),
            probabilities: probs,
        });
        state = g;
    }
    Ok(outputs)
}

pub fn ecan_predict(model: &EcanModel, x_raw: ArrayView1<f64>) -> Result<usize> {
    let outputs = ecan_forward(model, x_raw)?;
    Ok(crate::core::argmax(
        outputs.last().expect("at least one fold").probabilities.view(),
    ))
}

/// Gradients for every trainable tensor of the network.
pub struct EcanGradients {
    pub dp: Vec<Array2<f64>>,
    pub dl: Vec<Array2<f64>>,
    pub dw: Vec<Option<Array2<f64>>>,
}

fn fold_penalties(model: &EcanModel, w: &PenaltyWeights) -> f64 {
    model
        .folds
        .iter()
        .map(|fold| {
            w.xi * crate::objectives::orthogonality_penalty(&fold.eca.p)
                + w.gamma * crate::objectives::binarity_penalty(&fold.eca.l, fold.eca.omega)
        })
        .sum()
}

/// The joint objective: pi-weighted per-fold negative log-likelihoods of the
/// overlap-normalized probabilities, plus per-fold penalties.
pub fn ecan_loss(batch: Batch, model: &EcanModel, w: &PenaltyWeights) -> Result<f64> {
    ecan_loss_scaled(batch, model, w, 1.0)
}

pub(crate) fn ecan_loss_scaled(
    batch: Batch,
    model: &EcanModel,
    w: &PenaltyWeights,
    data_scale: f64,
) -> Result<f64> {
    let tau = model.folds.len();
    let softs: Vec<Array2<f64>> = model
        .folds
        .iter()
        .map(|f| ecmm_soft(&f.eca.l, f.eca.chi, f.eca.omega))
        .collect();
    let chunks = map_chunks(batch.len(), |(a, b)| -> Result<f64> {
        let mut acc = 0.0;
        for i in a..b {
            let mut state = batch.x.row(i).to_owned();
            for t in 0..tau {
                let fold = &model.folds[t];
                let (v, _) = forward_op(&fold.op, state.view());
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(EcaError::ZeroVector(format!(
                        "fold {t}: dimension operator annihilated sample {i}"
                    )));
                }
                let xhat = v.mapv(|a| a / norm);
                let g = fold.eca.p.t().dot(&xhat);
                let c = g.mapv(|a| a * a);
                let soft = &softs[t];
                let mut p = 0.0;
                for j in 0..fold.eca.m() {
                    let srow: f64 = soft.row(j).sum();
                    if srow < 1e-12 {
                        continue;
                    }
                    p += c[j] * soft[[j, batch.labels[i]]] / srow;
                }
                acc -= model.pi[t] * p.clamp(LOG_EPS, 1.0).ln();
                state = g;
            }
        }
        Ok(acc)
    });
    let mut data = 0.0;
    for chunk in chunks {
        data += chunk?;
    }
    Ok(data * data_scale + fold_penalties(model, w))
}

struct ChunkGrads {
    loss: f64,
    dp: Vec<Array2<f64>>,
    dmap: Vec<Array2<f64>>,
    vrow: Vec<Array1<f64>>,
    dw: Vec<Option<Array2<f64>>>,
}

/// Loss plus gradients for every fold's P, L and operator weights.
pub fn ecan_loss_and_gradients(
    batch: Batch,
    model: &EcanModel,
    w: &PenaltyWeights,
    data_scale: f64,
) -> Result<(f64, EcanGradients)> {
    let tau = model.folds.len();
    let softs: Vec<Array2<f64>> = model
        .folds
        .iter()
        .map(|f| ecmm_soft(&f.eca.l, f.eca.chi, f.eca.omega))
        .collect();
    let rowsums: Vec<Array1<f64>> = softs.iter().map(|s| s.sum_axis(Axis(1))).collect();

    let chunks = map_chunks(batch.len(), |(a, b)| -> Result<ChunkGrads> {
        let rows = b - a;
        let mut loss = 0.0;
        let mut dp: Vec<Array2<f64>> = model
            .folds
            .iter()
            .map(|f| Array2::zeros((f.eca.m(), f.eca.m())))
            .collect();
        let mut dmap: Vec<Array2<f64>> = model
            .folds
            .iter()
            .map(|f| Array2::zeros((f.eca.m(), f.eca.classes())))
            .collect();
        let mut vrow: Vec<Array1<f64>> = model
            .folds
            .iter()
            .map(|f| Array1::zeros(f.eca.m()))
            .collect();
        let mut dw: Vec<Option<Array2<f64>>> = model
            .folds
            .iter()
            .map(|f| f.op.weights.as_ref().map(|w| Array2::zeros(w.dim())))
            .collect();

        // forward caches, batched per fold
        let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(tau); // op inputs
        let mut pres: Vec<Option<Array2<f64>>> = Vec::with_capacity(tau);
        let mut xhats: Vec<Array2<f64>> = Vec::with_capacity(tau);
        let mut norms: Vec<Array1<f64>> = Vec::with_capacity(tau);
        let mut gs: Vec<Array2<f64>> = Vec::with_capacity(tau);

        let mut state = batch.x.slice(s![a..b, ..]).to_owned();
        for t in 0..tau {
            let fold = &model.folds[t];
            let mut v = Array2::<f64>::zeros((rows, fold.op.out_dim));
            let mut pre: Option<Array2<f64>> = fold
                .op
                .weights
                .as_ref()
                .map(|w| Array2::zeros((rows, w.nrows())));
            for i in 0..rows {
                let (vi, pi) = forward_op(&fold.op, state.row(i));
                v.row_mut(i).assign(&vi);
                if let (Some(store), Some(p)) = (pre.as_mut(), pi) {
                    store.row_mut(i).assign(&p);
                }
            }
            let mut norm = Array1::<f64>::zeros(rows);
            for i in 0..rows {
                let n = v.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
                if n < 1e-12 {
                    return Err(EcaError::ZeroVector(format!(
                        "fold {t}: dimension operator annihilated sample {}",
                        a + i
                    )));
                }
                norm[i] = n;
            }
            let mut xhat = v;
            for i in 0..rows {
                let n = norm[i];
                xhat.row_mut(i).mapv_inplace(|x| x / n);
            }
            let g = xhat.dot(&fold.eca.p);
            inputs.push(state);
            pres.push(pre);
            xhats.push(xhat);
            norms.push(norm);
            state = g.clone();
            gs.push(g);
        }

        // per-fold data terms and the backward sweep
        let mut dstate = Array2::<f64>::zeros((rows, model.folds[tau - 1].eca.m()));
        for t in (0..tau).rev() {
            let fold = &model.folds[t];
            let m = fold.eca.m();
            let lcls = fold.eca.classes();
            let g = &gs[t];
            let c = g.mapv(|x| x * x);
            let soft = &softs[t];
            let srow = &rowsums[t];
            // reweighted mapping r_jk = soft_jk / srow_j
            let mut a_mat = Array2::<f64>::zeros((rows, lcls));
            for i in 0..rows {
                let y = batch.labels[a + i];
                let mut p = 0.0;
                for j in 0..m {
                    if srow[j] >= 1e-12 {
                        p += c[[i, j]] * soft[[j, y]] / srow[j];
                    }
                }
                loss -= model.pi[t] * p.clamp(LOG_EPS, 1.0).ln();
                if (LOG_EPS..=1.0).contains(&p) {
                    a_mat[[i, y]] = -model.pi[t] / p;
                }
            }
            // dC = A R^T with R = soft / srow
            let mut reweighted = soft.clone();
            for j in 0..m {
                if srow[j] < 1e-12 {
                    reweighted.row_mut(j).fill(0.0);
                } else {
                    let f = 1.0 / srow[j];
                    reweighted.row_mut(j).mapv_inplace(|v| v * f);
                }
            }
            let dc = a_mat.dot(&reweighted.t());
            // mapping gradient pieces (finished later): M = C^T A and the
            // per-row correction
            dmap[t] += &c.t().dot(&a_mat);
            let al = a_mat.dot(&soft.t());
            for j in 0..m {
                let mut sacc = 0.0;
                for i in 0..rows {
                    sacc += c[[i, j]] * al[[i, j]];
                }
                vrow[t][j] += sacc;
            }
            // dG from this fold's data term plus whatever flows from above
            let mut dg = dstate;
            dg += &(2.0 * g * &dc);
            // parameter and input gradients of the projection
            dp[t] += &xhats[t].t().dot(&dg);
            let dxhat = dg.dot(&fold.eca.p.t());
            // back through the normalization
            let mut dv = dxhat;
            for i in 0..rows {
                let xhat_row = xhats[t].row(i);
                let dot = dv.row(i).dot(&xhat_row);
                let n = norms[t][i];
                let mut row = dv.row_mut(i);
                for (slot, &xh) in row.iter_mut().zip(xhat_row.iter()) {
                    *slot = (*slot - dot * xh) / n;
                }
            }
            // back through the operator
            let mut dprev = Array2::<f64>::zeros((rows, fold.op.in_dim));
            for i in 0..rows {
                let pre_row = pres[t].as_ref().map(|p| p.row(i).to_owned());
                let mut dxi = Array1::<f64>::zeros(fold.op.in_dim);
                backward_op(
                    &fold.op,
                    inputs[t].row(i),
                    pre_row.as_ref(),
                    dv.row(i),
                    &mut dxi,
                    dw[t].as_mut(),
                );
                dprev.row_mut(i).assign(&dxi);
            }
            dstate = dprev;
        }

        Ok(ChunkGrads {
            loss,
            dp,
            dmap,
            vrow,
            dw,
        })
    });

    let mut data_loss = 0.0;
    let mut dp: Vec<Array2<f64>> = model
        .folds
        .iter()
        .map(|f| Array2::zeros((f.eca.m(), f.eca.m())))
        .collect();
    let mut dmap: Vec<Array2<f64>> = model
        .folds
        .iter()
        .map(|f| Array2::zeros((f.eca.m(), f.eca.classes())))
        .collect();
    let mut vrow: Vec<Array1<f64>> = model
        .folds
        .iter()
        .map(|f| Array1::zeros(f.eca.m()))
        .collect();
    let mut dw: Vec<Option<Array2<f64>>> = model
        .folds
        .iter()
        .map(|f| f.op.weights.as_ref().map(|w| Array2::zeros(w.dim())))
        .collect();
    for chunk in chunks {
        let chunk = chunk?;
        data_loss += chunk.loss;
        for t in 0..tau {
            dp[t] += &chunk.dp[t];
            dmap[t] += &chunk.dmap[t];
            vrow[t] += &chunk.vrow[t];
            if let (Some(acc), Some(part)) = (dw[t].as_mut(), chunk.dw[t].as_ref()) {
                *acc += part;
            }
        }
    }
    if data_scale != 1.0 {
        data_loss *= data_scale;
        for t in 0..tau {
            dp[t].mapv_inplace(|v| v * data_scale);
            dmap[t].mapv_inplace(|v| v * data_scale);
            vrow[t].mapv_inplace(|v| v * data_scale);
            if let Some(acc) = dw[t].as_mut() {
                acc.mapv_inplace(|v| v * data_scale);
            }
        }
    }

    // finish the overlap-normalized mapping gradient and add penalties
    let mut dl: Vec<Array2<f64>> = Vec::with_capacity(tau);
    for t in 0..tau {
        let fold = &model.folds[t];
        let m = fold.eca.m();
        let lcls = fold.eca.classes();
        let srow = &rowsums[t];
        let mut dldot = Array2::<f64>::zeros((m, lcls));
        for j in 0..m {
            if srow[j] < 1e-12 {
                continue;
            }
            let corr = vrow[t][j] / (srow[j] * srow[j]);
            for k in 0..lcls {
                dldot[[j, k]] = dmap[t][[j, k]] / srow[j] - corr;
            }
        }
        let mut dlt = &dldot * &soft_mapping_derivative(&fold.eca);
        if w.xi != 0.0 {
            let ptp = fold.eca.p.t().dot(&fold.eca.p);
            let mut r = -ptp;
            for i in 0..m {
                r[[i, i]] += 1.0;
            }
            dp[t].scaled_add(-4.0 * w.xi, &fold.eca.p.dot(&r));
        }
        if w.gamma != 0.0 {
            let om = fold.eca.omega;
            for ((j, k), gslot) in dlt.indexed_iter_mut() {
                let two = 2.0 * om * fold.eca.l[[j, k]];
                *gslot += w.gamma * (-4.0 * om) * (1.0 + two.cos()) * two.sin();
            }
        }
        dl.push(dlt);
    }

    let total = data_loss + fold_penalties(model, w);
    Ok((total, EcanGradients { dp, dl, dw }))
}

/// Architecture description: per fold, the operator kind with its output
/// dimension (the fold's eigenfeature count). Input dimensions chain from
/// the data and the previous fold.
#[derive(Debug, Clone)]
pub struct ArchitectureSpec {
    pub folds: Vec<(DimOpKind, usize)>,
}

impl ArchitectureSpec {
    /// Instantiate a seeded model for `input_dim`-dimensional data with
    /// `classes` classes.
    pub fn build(
        &self,
        input_dim: usize,
        classes: usize,
        seed: u64,
        chi: f64,
        omega: f64,
    ) -> Result<EcanModel> {
        if self.folds.is_empty() {
            return Err(EcaError::Architecture("architecture has no folds".into()));
        }
        let mut rng = derive_rng(seed, "ecan-ops");
        let mut folds = Vec::with_capacity(self.folds.len());
        let mut in_dim = input_dim;
        for (t, &(kind, out_dim)) in self.folds.iter().enumerate() {
            let out_dim = if kind.is_identity() { in_dim } else { out_dim };
            let op = DimensionOperator::init(kind, in_dim, out_dim, &mut rng)?;
            let eca = init_model(
                out_dim,
                classes,
                seed.wrapping_add(1000 + t as u64),
                chi,
                omega,
            )?;
            folds.push(Fold { op, eca });
            in_dim = out_dim;
        }
        EcanModel::with_uniform_pi(folds)
    }
}

/// Joint end-to-end training of every fold.
pub fn train_ecan(
    data: &Prepared,
    architecture: &ArchitectureSpec,
    config: &TrainConfig,
) -> Result<EcanModel> {
    let n = data.x.nrows();
    if n == 0 {
        return Err(EcaError::Config("training set is empty".into()));
    }
    let mut model = architecture.build(
        data.x.ncols(),
        data.classes,
        config.seed,
        config.chi,
        config.omega,
    )?;

    let mut shapes: Vec<(usize, usize)> = Vec::new();
    for fold in &model.folds {
        shapes.push(fold.eca.p.dim());
        shapes.push(fold.eca.l.dim());
        if let Some(w) = &fold.op.weights {
            shapes.push(w.dim());
        }
    }
    let mut opt = Optimizer::new(config.optimizer, &shapes, config.learning_rate);

    let batch_size = effective_batch_size(n, config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = derive_rng(config.seed, "shuffle");
    let mut batch_x = Array2::<f64>::zeros((batch_size, data.x.ncols()));
    let mut batch_y = vec![0usize; batch_size];
    let total_steps = (config.epochs * n.div_ceil(batch_size)) as f64;
    let mut step_idx = 0usize;

    for _ in 0..config.epochs {
        crate::trainer::shuffle_indices(&mut order, &mut shuffle_rng);
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let take = end - start;
            for (row, &src) in order[start..end].iter().enumerate() {
                batch_x.slice_mut(s![row, ..]).assign(&data.x.row(src));
                batch_y[row] = data.y[src];
            }
            let batch = Batch::new(
                batch_x.slice(s![..take, ..]),
                &batch_y[..take],
                data.classes,
            );
            let (_, grads) =
                ecan_loss_and_gradients(batch, &model, &config.weights, 1.0 / take as f64)?;
            opt.set_lr(cosine_lr(config.learning_rate, step_idx as f64, total_steps));
            {
                let mut params: Vec<&mut Array2<f64>> = Vec::new();
                let mut grad_refs: Vec<&Array2<f64>> = Vec::new();
                for (t, fold) in model.folds.iter_mut().enumerate() {
                    params.push(&mut fold.eca.p);
                    grad_refs.push(&grads.dp[t]);
                    params.push(&mut fold.eca.l);
                    grad_refs.push(&grads.dl[t]);
                    if let Some(w) = fold.op.weights.as_mut() {
                        params.push(w);
                        grad_refs.push(grads.dw[t].as_ref().expect("trainable"));
                    }
                }
                opt.step(&mut params, &grad_refs);
            }
            // projected gradient keeps quadratic operators real-valued
            for fold in model.folds.iter_mut() {
                if matches!(fold.op.kind, DimOpKind::QuadRaise | DimOpKind::QuadReduce) {
                    if let Some(w) = fold.op.weights.as_mut() {
                        w.mapv_inplace(|v| v.max(0.0));
                    }
                }
            }
            step_idx += 1;
            start = end;
        }
    }
    Ok(model)
}

/// Per-fold accuracy on labeled data.
pub fn evaluate_ecan(data: &Prepared, model: &EcanModel) -> Result<Vec<f64>> {
    let tau = model.folds.len();
    let chunks = map_chunks(data.x.nrows(), |(a, b)| -> Result<Vec<usize>> {
        let mut correct = vec![0usize; tau];
        for i in a..b {
            let outputs = ecan_forward(model, data.x.row(i))?;
            for (t, out) in outputs.iter().enumerate() {
                if crate::core::argmax(out.probabilities.view()) == data.y[i] {
                    correct[t] += 1;
                }
            }
        }
        Ok(correct)
    });
    let mut correct = vec![0usize; tau];
    for chunk in chunks {
        for (acc, c) in correct.iter_mut().zip(chunk?) {
            *acc += c;
        }
    }
    let n = data.x.nrows().max(1) as f64;
    Ok(correct.into_iter().map(|c| c as f64 / n).collect())
}

pub fn save_ecan(model: &EcanModel, path: &Path) -> Result<()> {
    fs::write(path, render_ecan(model))?;
    Ok(())
}

pub fn render_ecan(model: &EcanModel) -> String {
    let last = &model.folds.last().expect("nonempty").eca;
    let mut w = JsonWriter::new();
    w.field_u64("format_version", model_io::FORMAT_VERSION);
    w.field_u64("m", last.m() as u64);
    w.field_u64("l", last.classes() as u64);
    w.field_f64("chi", last.chi);
    w.field_f64("omega", last.omega);
    w.field_matrix("P", &last.p);
    w.field_matrix("L", &last.l);
    w.field_vector("pi", &model.pi);
    w.field_array_of("folds", &model.folds, |w, fold| {
        w.field_object("dim_op", |w| {
            w.field_str("kind", fold.op.kind.name());
            w.field_u64("in_dim", fold.op.in_dim as u64);
            w.field_u64("out_dim", fold.op.out_dim as u64);
            match &fold.op.weights {
                Some(weights) => w.field_matrix("weights", weights),
                None => w.field_null("weights"),
            }
        });
        w.field_object("eca", |w| {
            w.field_u64("m", fold.eca.m() as u64);
            w.field_u64("l", fold.eca.classes() as u64);
            w.field_f64("chi", fold.eca.chi);
            w.field_f64("omega", fold.eca.omega);
            w.field_matrix("P", &fold.eca.p);
            w.field_matrix("L", &fold.eca.l);
        });
    });
    w.finish()
}

pub fn load_ecan(path: &Path) -> Result<EcanModel> {
    let text = fs::read_to_string(path)?;
    let doc = model_io::parse_document(&text)?;
    ecan_from_doc(&doc)
}

pub(crate) fn ecan_from_doc(doc: &serde_json::Value) -> Result<EcanModel> {
    let folds_raw = doc
        .get("folds")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| EcaError::Format("missing 'folds' array".into()))?;
    let pi = model_io::get_vector(doc, "pi", folds_raw.len())?.to_vec();
    let mut folds = Vec::with_capacity(folds_raw.len());
    for (t, entry) in folds_raw.iter().enumerate() {
        let op_doc = entry
            .get("dim_op")
            .ok_or_else(|| EcaError::Format(format!("fold {t}: missing dim_op")))?;
        let kind = DimOpKind::from_name(model_io::get_str(op_doc, "kind")?)?;
        let in_dim = model_io::get_u64(op_doc, "in_dim")? as usize;
        let out_dim = model_io::get_u64(op_doc, "out_dim")? as usize;
        let weights = match op_doc.get("weights") {
            None | Some(serde_json::Value::Null) => None,
            Some(_) => {
                let shape = DimensionOperator::weight_shape(kind, in_dim, out_dim)
                    .ok_or_else(|| {
                        EcaError::Format(format!("fold {t}: {} takes no weights", kind.name()))
                    })?;
                Some(model_io::get_matrix(op_doc, "weights", shape.0, shape.1)?)
            }
        };
        let op = DimensionOperator::new(kind, in_dim, out_dim, weights)?;
        let eca_doc = entry
            .get("eca")
            .ok_or_else(|| EcaError::Format(format!("fold {t}: missing eca")))?;
        let eca = crate::trainer::model_from_doc(eca_doc)?;
        folds.push(Fold { op, eca });
    }
    EcanModel::new(folds, pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{class_probabilities, PmfMode};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    const OMEGA: f64 = std::f64::consts::FRAC_PI_2;

    #[test]
    fn dim_op_examples() {
        let op = DimensionOperator::identity(3);
        let x = array![0.3, -0.2, 0.9];
        assert_eq!(apply_dim_op(&op, x.view()).unwrap(), x);

        // quad raise on a negative coordinate recovers its magnitude
        let op = DimensionOperator::new(
            DimOpKind::QuadRaise,
            1,
            2,
            Some(array![[0.0, 1.0]]),
        )
        .unwrap();
        let out = apply_dim_op(&op, array![-3.0].view()).unwrap();
        assert_eq!(out, array![-3.0, 3.0]);

        // dense with zero weights and bias collapses everything
        let op = DimensionOperator::new(
            DimOpKind::Dense,
            2,
            2,
            Some(Array2::zeros((2, 3))),
        )
        .unwrap();
        let out = apply_dim_op(&op, array![1.0, 2.0].view()).unwrap();
        assert_eq!(out, array![0.0, 0.0]);

        // dimension mismatch is rejected
        assert!(apply_dim_op(&op, array![1.0].view()).is_err());
    }

    #[test]
    fn dim_op_validation() {
        assert!(DimensionOperator::new(DimOpKind::Identity, 2, 3, None).is_err());
        assert!(DimensionOperator::new(
            DimOpKind::QuadRaise,
            3,
            2,
            Some(Array2::zeros((1, 4)))
        )
        .is_err());
        assert!(DimensionOperator::new(
            DimOpKind::QuadReduce,
            2,
            3,
            Some(Array2::zeros((3, 3)))
        )
        .is_err());
        // negative quadratic weights break the radicand invariant
        assert!(DimensionOperator::new(
            DimOpKind::QuadReduce,
            3,
            2,
            Some(Array2::from_elem((2, 4), -0.1))
        )
        .is_err());
    }

    #[test]
    fn resize_regrids_images() {
        let op = DimensionOperator::new(DimOpKind::Resize, 4, 16, None).unwrap();
        let x = array![1.0, 2.0, 3.0, 4.0];
        let out = apply_dim_op(&op, x.view()).unwrap();
        assert_eq!(out.len(), 16);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[15], 4.0);
        assert_abs_diff_eq!(out.sum(), 4.0 * (1.0 + 2.0 + 3.0 + 4.0), epsilon = 1e-12);
    }

    fn unit_rows(x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
    }

    #[test]
    fn one_fold_identity_reduces_to_plain_eca() {
        let eca = init_model(4, 2, 3, 10.0, OMEGA).unwrap();
        let model = EcanModel::with_uniform_pi(vec![Fold {
            op: DimensionOperator::identity(4),
            eca: eca.clone(),
        }])
        .unwrap();
        // exactly-unit inputs keep the renormalization a division by 1.0
        let inputs = [
            array![1.0, 0.0, 0.0, 0.0],
            array![0.0, 0.0, -1.0, 0.0],
            array![0.5, 0.5, 0.5, 0.5],
            array![-0.5, 0.5, -0.5, 0.5],
        ];
        for x in inputs {
            let outputs = ecan_forward(&model, x.view()).unwrap();
            let direct = class_probabilities(x.view(), &eca, PmfMode::Modified);
            assert_eq!(outputs.len(), 1);
            for (a, b) in outputs[0].probabilities.iter().zip(direct.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_fold_form_with_identity_basis() {
        // a single fold with identity operator and P = I realizes the
        // probabilities (x .* x) L for a disjoint binary mapping
        let big = std::f64::consts::PI / (2.0 * OMEGA);
        let l = array![[big, -big], [-big, big], [big, -big]];
        let eca = EcaModel::new(Array2::eye(3), l, 60.0, OMEGA).unwrap();
        let model = EcanModel::with_uniform_pi(vec![Fold {
            op: DimensionOperator::identity(3),
            eca,
        }])
        .unwrap();
        let x = array![0.5, 0.5, 1.0 / 2.0f64.sqrt()];
        let outputs = ecan_forward(&model, x.view()).unwrap();
        let expect0 = 0.25 + 0.5; // features 0 and 2 belong to class 0
        let expect1 = 0.25;
        assert_abs_diff_eq!(outputs[0].probabilities[0], expect0, epsilon = 1e-6);
        assert_abs_diff_eq!(outputs[0].probabilities[1], expect1, epsilon = 1e-6);
    }

    #[test]
    fn adjacent_non_identity_operators_are_rejected() {
        let mut rng = derive_rng(5, "arch");
        let op1 = DimensionOperator::init(DimOpKind::QuadReduce, 6, 4, &mut rng).unwrap();
        let op2 = DimensionOperator::init(DimOpKind::QuadReduce, 4, 3, &mut rng).unwrap();
        let folds = vec![
            Fold {
                op: op1,
                eca: init_model(4, 2, 1, 10.0, OMEGA).unwrap(),
            },
            Fold {
                op: op2,
                eca: init_model(3, 2, 2, 10.0, OMEGA).unwrap(),
            },
        ];
        assert!(matches!(
            EcanModel::with_uniform_pi(folds),
            Err(EcaError::Architecture(_))
        ));
    }

    #[test]
    fn mismatched_chain_is_rejected() {
        let arch = ArchitectureSpec {
            folds: vec![(DimOpKind::QuadReduce, 10)],
        };
        assert!(arch.build(4, 2, 1, 10.0, OMEGA).is_err());
    }

    #[test]
    fn renormalization_keeps_states_unit() {
        let arch = ArchitectureSpec {
            folds: vec![(DimOpKind::QuadReduce, 3), (DimOpKind::Identity, 0)],
        };
        let model = arch.build(5, 2, 9, 10.0, OMEGA).unwrap();
        let mut rng = derive_rng(4, "renorm");
        for _ in 0..50 {
            let mut x = Array2::from_shape_fn((1, 5), |_| standard_normal(&mut rng));
            unit_rows(&mut x);
            let outputs = ecan_forward(&model, x.row(0)).unwrap();
            for out in &outputs {
                // each fold's coefficients are a projection of a unit state
                // through a near-orthogonal P, so their energy is ~1
                let energy: f64 = out.coefficients.iter().map(|v| v * v).sum();
                assert!((energy - 1.0).abs() < 1e-9, "energy {energy}");
            }
        }
    }

    #[test]
    fn quad_raise_keeps_the_original_block() {
        let mut rng = derive_rng(6, "raise");
        let op = DimensionOperator::init(DimOpKind::QuadRaise, 3, 5, &mut rng).unwrap();
        let x = array![0.2, -0.7, 0.4];
        let out = apply_dim_op(&op, x.view()).unwrap();
        for j in 0..3 {
            assert_eq!(out[j], x[j]);
        }
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pi_weighting_examples() {
        // pi concentrated on the last fold reproduces the last-fold loss
        let arch = ArchitectureSpec {
            folds: vec![(DimOpKind::Identity, 0), (DimOpKind::QuadReduce, 3)],
        };
        let mut model = arch.build(4, 2, 3, 10.0, OMEGA).unwrap();
        let mut rng = derive_rng(7, "pi");
        let mut x = Array2::from_shape_fn((6, 4), |_| standard_normal(&mut rng));
        unit_rows(&mut x);
        let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let batch = Batch::new(x.view(), &labels, 2);
        let w = PenaltyWeights {
            xi: 0.0,
            gamma: 0.0,
            sparsity: 0.0,
            sparsity_kind: crate::objectives::SparsityKind::None,
        };
        model.pi = vec![0.0, 1.0];
        let last_only = ecan_loss(batch, &model, &w).unwrap();
        model.pi = vec![1.0, 0.0];
        let first_only = ecan_loss(batch, &model, &w).unwrap();
        model.pi = vec![0.5, 0.5];
        let both = ecan_loss(batch, &model, &w).unwrap();
        assert_abs_diff_eq!(both, 0.5 * (first_only + last_only), epsilon = 1e-10);

        // duplicated identical folds with uniform pi give equal per-fold terms
        let eca = init_model(4, 2, 11, 10.0, OMEGA).unwrap();
        let twin = EcanModel::with_uniform_pi(vec![
            Fold {
                op: DimensionOperator::identity(4),
                eca: eca.clone(),
            },
            Fold {
                op: DimensionOperator::identity(4),
                eca: eca.clone(),
            },
        ]);
        // identical parameters, but the second fold's input is g_1, not x;
        // use a symmetric input fixed by the projection to make them equal:
        // P^T P = I and x an eigenvector of P with eigenvalue 1 would be
        // needed in general, so check the straightforward algebraic identity
        // instead: per-fold losses coincide when the state is unchanged,
        // i.e. with P = I
        drop(twin);
        let big = std::f64::consts::PI / (2.0 * OMEGA);
        let l = array![[big, -big], [-big, big], [big, -big], [-big, big]];
        let eye_eca = EcaModel::new(Array2::eye(4), l, 40.0, OMEGA).unwrap();
        let twin = EcanModel::with_uniform_pi(vec![
            Fold {
                op: DimensionOperator::identity(4),
                eca: eye_eca.clone(),
            },
            Fold {
                op: DimensionOperator::identity(4),
                eca: eye_eca,
            },
        ])
        .unwrap();
        let fold_losses = {
            let mut per_fold = Vec::new();
            for t in 0..2 {
                let mut probe = twin.clone();
                probe.pi = if t == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
                per_fold.push(ecan_loss(batch, &probe, &w).unwrap());
            }
            per_fold
        };
        assert_abs_diff_eq!(fold_losses[0], fold_losses[1], epsilon = 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences_on_a_two_fold_toy() {
        // m = 4 -> quad reduce to 3, l = 2
        let arch = ArchitectureSpec {
            folds: vec![(DimOpKind::Identity, 0), (DimOpKind::QuadReduce, 3)],
        };
        let model = arch.build(4, 2, 13, 10.0, OMEGA).unwrap();
        let mut rng = derive_rng(14, "ecan-grad");
        let mut x = Array2::from_shape_fn((5, 4), |_| standard_normal(&mut rng));
        unit_rows(&mut x);
        let labels: Vec<usize> = (0..5).map(|i| i % 2).collect();
        let batch = Batch::new(x.view(), &labels, 2);
        let w = PenaltyWeights {
            xi: 0.4,
            gamma: 0.15,
            sparsity: 0.0,
            sparsity_kind: crate::objectives::SparsityKind::None,
        };
        let (_, grads) = ecan_loss_and_gradients(batch, &model, &w, 1.0).unwrap();

        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut compare = |analytic: &Array2<f64>, set: &dyn Fn(&mut EcanModel, usize, usize, f64)| {
            let (rows, cols) = analytic.dim();
            let mut fd = Array2::<f64>::zeros((rows, cols));
            for r in 0..rows {
                for c in 0..cols {
                    let probe = |d: f64| {
                        let mut mm = model.clone();
                        set(&mut mm, r, c, d);
                        ecan_loss(batch, &mm, &w).unwrap()
                    };
                    fd[[r, c]] = (probe(h) - probe(-h)) / (2.0 * h);
                }
            }
            let scale = 1.0 + fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let gap = analytic
                .iter()
                .zip(fd.iter())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            worst = worst.max(gap / scale);
        };
        for t in 0..2 {
            compare(&grads.dp[t], &|mm, r, c, d| mm.folds[t].eca.p[[r, c]] += d);
            compare(&grads.dl[t], &|mm, r, c, d| mm.folds[t].eca.l[[r, c]] += d);
            if let Some(dw) = &grads.dw[t] {
                compare(dw, &|mm, r, c, d| {
                    if let Some(w) = mm.folds[t].op.weights.as_mut() {
                        w[[r, c]] += d;
                    }
                });
            }
        }
        assert!(worst < 1e-4, "disagreement {worst}");
    }

    #[test]
    fn training_a_small_network_learns_axis_data() {
        // class 0 concentrated on the first two axes, class 1 on the rest
        let mut rng = derive_rng(21, "ecan-train");
        let n = 400;
        let mut x = Array2::<f64>::zeros((n, 4));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let axis = 2 * class + (i / 2) % 2;
            let radius = 0.7 + 0.6 * crate::rng::uniform01(&mut rng);
            for j in 0..4 {
                x[[i, j]] = 0.25 * standard_normal(&mut rng) + radius * f64::from(j == axis);
            }
            labels.push(class);
        }
        unit_rows(&mut x);
        let data = Prepared {
            x,
            y: labels,
            classes: 2,
            dropped: 0,
        };
        let arch = ArchitectureSpec {
            folds: vec![(DimOpKind::QuadReduce, 3), (DimOpKind::Identity, 0)],
        };
        let config = TrainConfig {
            epochs: 300,
            learning_rate: 0.05,
            seed: 2,
            chi: 5.0,
            ..TrainConfig::default()
        };
        let model = train_ecan(&data, &arch, &config).unwrap();
        let accs = evaluate_ecan(&data, &model).unwrap();
        assert!(
            accs.iter().all(|&a| a > 0.95),
            "per-fold accuracies {accs:?}"
        );
    }

    #[test]
    fn zero_vector_mid_network_is_an_error() {
        // a dense operator with zero weights annihilates every state
        let dense = DimensionOperator::new(
            DimOpKind::Dense,
            3,
            3,
            Some(Array2::zeros((3, 4))),
        )
        .unwrap();
        let model = EcanModel::with_uniform_pi(vec![Fold {
            op: dense,
            eca: init_model(3, 2, 1, 10.0, OMEGA).unwrap(),
        }])
        .unwrap();
        let x = array![1.0, 0.0, 0.0];
        assert!(matches!(
            ecan_forward(&model, x.view()),
            Err(EcaError::ZeroVector(_))
        ));
    }

    #[test]
    fn ecan_file_round_trip() {
        let arch = ArchitectureSpec {
            folds: vec![(DimOpKind::Identity, 0), (DimOpKind::RectReduce, 3)],
        };
        let model = arch.build(5, 2, 17, 10.0, OMEGA).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ecan.json");
        save_ecan(&model, &path).unwrap();
        let back = load_ecan(&path).unwrap();
        assert_eq!(model.pi, back.pi);
        assert_eq!(model.folds.len(), back.folds.len());
        for (a, b) in model.folds.iter().zip(&back.folds) {
            assert_eq!(a.eca.p, b.eca.p);
            assert_eq!(a.eca.l, b.eca.l);
            assert_eq!(a.op.kind, b.op.kind);
            assert_eq!(a.op.weights, b.op.weights);
        }
    }
}
