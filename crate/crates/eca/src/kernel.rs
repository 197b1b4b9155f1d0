//! KECA: the VECA objective with projections replaced by kernel responses
//! against the columns of P and the orthogonality penalty replaced by a
//! Gram-matrix penalty. Squared kernel responses are normalized to the
//! simplex before the mapping product so the likelihood stays well-posed.

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::core::{ecmm_soft, EcaModel};
use crate::data::Prepared;
use crate::objectives::{
    soft_mapping_derivative, Batch, Gradients, PenaltyWeights, SparsityKind,
};
use crate::parallel::map_chunks;
use crate::trainer::{cosine_lr, init_model, Optimizer, TrainConfig};
use crate::{EcaError, Result, LOG_EPS};

/// Kernel family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// (1 + <x, x'>)^degree
    Polynomial { degree: u32 },
    /// exp(-gamma ||x - x'||^2); the reference width is gamma = 1
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Polynomial { degree } => {
                if *degree < 1 {
                    return Err(EcaError::Config("polynomial degree must be >= 1".into()));
                }
            }
            KernelSpec::Rbf { gamma } => {
                if *gamma <= 0.0 {
                    return Err(EcaError::Config("rbf gamma must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Evaluate the kernel on two equal-length vectors.
pub fn kernel_eval(spec: KernelSpec, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    assert_eq!(x.len(), y.len(), "kernel arguments must have equal length");
    match spec {
        KernelSpec::Polynomial { degree } => (1.0 + x.dot(&y)).powi(degree as i32),
        KernelSpec::Rbf { gamma } => {
            let mut d2 = 0.0;
            for (a, b) in x.iter().zip(y.iter()) {
                let d = a - b;
                d2 += d * d;
            }
            (-gamma * d2).exp()
        }
    }
}

/// Gradient of K(x, p) with respect to p.
fn kernel_grad_center(
    spec: KernelSpec,
    x: ArrayView1<f64>,
    p: ArrayView1<f64>,
    k_value: f64,
) -> Array1<f64> {
    match spec {
        KernelSpec::Polynomial { degree } => {
            let base = 1.0 + x.dot(&p);
            let f = degree as f64 * base.powi(degree as i32 - 1);
            x.mapv(|v| f * v)
        }
        KernelSpec::Rbf { gamma } => {
            let mut out = Array1::<f64>::zeros(p.len());
            for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(p.iter())) {
                *o = k_value * 2.0 * gamma * (a - b);
            }
            out
        }
    }
}

/// Kernel Gram matrix of the columns of P.
pub fn gram(spec: KernelSpec, p: &Array2<f64>) -> Array2<f64> {
    let m = p.ncols();
    let mut g = Array2::<f64>::zeros((m, m));
    for a in 0..m {
        for b in a..m {
            let v = kernel_eval(spec, p.column(a), p.column(b));
            g[[a, b]] = v;
            g[[b, a]] = v;
        }
    }
    g
}

/// Simplex-normalized squared kernel responses of one sample against the
/// columns of P.
pub fn keca_responses(spec: KernelSpec, x: ArrayView1<f64>, p: &Array2<f64>) -> Array1<f64> {
    let m = p.ncols();
    let mut r = Array1::<f64>::zeros(m);
    for j in 0..m {
        let k = kernel_eval(spec, x, p.column(j));
        r[j] = k * k;
    }
    let total = r.sum();
    if total > 1e-300 {
        r.mapv_inplace(|v| v / total);
    }
    r
}

/// Kernelized per-class probabilities.
pub fn keca_class_probabilities(
    spec: KernelSpec,
    x: ArrayView1<f64>,
    model: &EcaModel,
) -> Array1<f64> {
    let soft = ecmm_soft(&model.l, model.chi, model.omega);
    keca_responses(spec, x, &model.p).dot(&soft)
}

pub fn keca_predict(spec: KernelSpec, x: ArrayView1<f64>, model: &EcaModel) -> usize {
    crate::core::argmax(keca_class_probabilities(spec, x, model).view())
}

fn keca_penalties(model: &EcaModel, spec: KernelSpec, w: &PenaltyWeights, soft: &Array2<f64>) -> f64 {
    let g = gram(spec, &model.p);
    let m = g.nrows();
    let mut gap = 0.0;
    for ((i, j), v) in g.indexed_iter() {
        let r = if i == j { 1.0 - v } else { -v };
        gap += r * r;
    }
    let _ = m;
    let mut total = w.xi * gap;
    total += w.gamma * crate::objectives::binarity_penalty(&model.l, model.omega);
    if w.sparsity > 0.0 {
        total += w.sparsity * crate::objectives::sparsity_penalty(soft, w.sparsity_kind);
    }
    total
}

/// VECA-shaped negative log-likelihood on normalized squared kernel
/// responses, plus the Gram-matrix orthogonality penalty and the usual
/// binarity/sparsity terms.
pub fn keca_loss(batch: Batch, model: &EcaModel, spec: KernelSpec, w: &PenaltyWeights) -> f64 {
    keca_loss_scaled(batch, model, spec, w, 1.0)
}

pub(crate) fn keca_loss_scaled(
    batch: Batch,
    model: &EcaModel,
    spec: KernelSpec,
    w: &PenaltyWeights,
    data_scale: f64,
) -> f64 {
    let soft = ecmm_soft(&model.l, model.chi, model.omega);
    let data: f64 = map_chunks(batch.len(), |(a, b)| {
        let mut acc = 0.0;
        for i in a..b {
            let r = keca_responses(spec, batch.x.row(i), &model.p);
            let y = batch.labels[i];
            for k in 0..batch.classes {
                let (p, q) = response_pair(&r, &soft, k);
                if k == y {
                    acc -= p.clamp(LOG_EPS, 1.0).ln();
                } else {
                    acc -= q.clamp(LOG_EPS, 1.0).ln();
                }
            }
        }
        acc
    })
    .into_iter()
    .sum();
    data * data_scale + keca_penalties(model, spec, w, &soft)
}

fn response_pair(r: &Array1<f64>, soft: &Array2<f64>, k: usize) -> (f64, f64) {
    let mut p = 0.0;
    let mut q = 0.0;
    for (j, &rv) in r.iter().enumerate() {
        p += rv * soft[[j, k]];
        q += rv * (1.0 - soft[[j, k]]);
    }
    (p, q)
}

/// Loss and gradients with respect to P (kernel centers) and L.
pub fn keca_loss_and_gradients(
    batch: Batch,
    model: &EcaModel,
    spec: KernelSpec,
    w: &PenaltyWeights,
    data_scale: f64,
) -> (f64, Gradients) {
    let (m, l) = (model.m(), model.classes());
    let soft = ecmm_soft(&model.l, model.chi, model.omega);

    struct Partial {
        loss: f64,
        dp: Array2<f64>,
        dldot: Array2<f64>,
    }

    let partials = map_chunks(batch.len(), |(lo, hi)| {
        let mut loss = 0.0;
        let mut dp = Array2::<f64>::zeros((m, m));
        let mut dldot = Array2::<f64>::zeros((m, l));
        for i in lo..hi {
            let x = batch.x.row(i);
            let mut kappa = Array1::<f64>::zeros(m);
            let mut raw = Array1::<f64>::zeros(m);
            for j in 0..m {
                kappa[j] = kernel_eval(spec, x, model.p.column(j));
                raw[j] = kappa[j] * kappa[j];
            }
            let total = raw.sum().max(1e-300);
            let rhat = raw.mapv(|v| v / total);
            let y = batch.labels[i];
            let mut a = vec![0.0f64; l];
            let mut b = vec![0.0f64; l];
            for k in 0..l {
                let (p, q) = response_pair(&rhat, &soft, k);
                if k == y {
                    loss -= p.clamp(LOG_EPS, 1.0).ln();
                    if (LOG_EPS..=1.0).contains(&p) {
                        a[k] = -1.0 / p;
                    }
                } else {
                    loss -= q.clamp(LOG_EPS, 1.0).ln();
                    if (LOG_EPS..=1.0).contains(&q) {
                        b[k] = -1.0 / q;
                    }
                }
            }
            // d(data)/d rhat_j, then back through the simplex normalization
            let mut ghat = Array1::<f64>::zeros(m);
            for j in 0..m {
                let mut g = 0.0;
                for k in 0..l {
                    g += a[k] * soft[[j, k]] + b[k] * (1.0 - soft[[j, k]]);
                }
                ghat[j] = g;
                for k in 0..l {
                    dldot[[j, k]] += (a[k] - b[k]) * rhat[j];
                }
            }
            let inner: f64 = ghat.iter().zip(rhat.iter()).map(|(g, r)| g * r).sum();
            for j in 0..m {
                let dr = (ghat[j] - inner) / total;
                let dkappa = 2.0 * kappa[j] * dr;
                let gc = kernel_grad_center(spec, x, model.p.column(j), kappa[j]);
                for u in 0..m {
                    dp[[u, j]] += dkappa * gc[u];
                }
            }
        }
        Partial { loss, dp, dldot }
    });

    let mut data_loss = 0.0;
    let mut dp = Array2::<f64>::zeros((m, m));
    let mut dldot = Array2::<f64>::zeros((m, l));
    for part in partials {
        data_loss += part.loss;
        dp += &part.dp;
        dldot += &part.dldot;
    }
    if data_scale != 1.0 {
        data_loss *= data_scale;
        dp.mapv_inplace(|v| v * data_scale);
        dldot.mapv_inplace(|v| v * data_scale);
    }

    if w.sparsity > 0.0 {
        match w.sparsity_kind {
            SparsityKind::None => {}
            SparsityKind::L1 => {
                let g = w.sparsity / (m * l) as f64;
                dldot.mapv_inplace(|v| v + g);
            }
            SparsityKind::L2 => {
                dldot += &soft.mapv(|v| 2.0 * w.sparsity * v);
            }
        }
    }

    let mut dl = &dldot * &soft_mapping_derivative(model);
    if w.gamma != 0.0 {
        let om = model.omega;
        for ((j, k), g) in dl.indexed_iter_mut() {
            let two = 2.0 * om * model.l[[j, k]];
            *g += w.gamma * (-4.0 * om) * (1.0 + two.cos()) * two.sin();
        }
    }

    // Gram penalty gradient: -4 xi sum_b R_cb d1K(P_c, P_b)
    if w.xi != 0.0 {
        let g = gram(spec, &model.p);
        for c in 0..m {
            let mut acc = Array1::<f64>::zeros(m);
            for bcol in 0..m {
                let r = if c == bcol { 1.0 - g[[c, bcol]] } else { -g[[c, bcol]] };
                if r == 0.0 {
                    continue;
                }
                let gc = kernel_grad_center(spec, model.p.column(bcol), model.p.column(c), g[[c, bcol]]);
                acc.scaled_add(r, &gc);
            }
            for u in 0..m {
                dp[[u, c]] += -4.0 * w.xi * acc[u];
            }
        }
    }

    let total = data_loss + keca_penalties(model, spec, w, &soft);
    (total, Gradients { dp, dl })
}

/// Gradient descent on the kernelized objective.
pub fn train_keca(data: &Prepared, spec: KernelSpec, config: &TrainConfig) -> Result<EcaModel> {
    spec.validate()?;
    let n = data.x.nrows();
    if n == 0 {
        return Err(EcaError::Config("training set is empty".into()));
    }
    let (m, l) = (data.x.ncols(), data.classes);
    let mut model = init_model(m, l, config.seed, config.chi, config.omega)?;
    let mut opt = Optimizer::new(
        config.optimizer,
        &[(m, m), (m, l)],
        config.learning_rate,
    );
    let batch_size = crate::trainer::effective_batch_size(n, config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = crate::rng::derive_rng(config.seed, "shuffle");
    let mut batch_x = Array2::<f64>::zeros((batch_size, m));
    let mut batch_y = vec![0usize; batch_size];
    let total_steps = (config.epochs * n.div_ceil(batch_size)) as f64;
    let mut step = 0usize;
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
            let batch = Batch::new(batch_x.slice(s![..take, ..]), &batch_y[..take], l);
            let (_, grad) =
                keca_loss_and_gradients(batch, &model, spec, &config.weights, 1.0 / take as f64);
            opt.set_lr(cosine_lr(config.learning_rate, step as f64, total_steps));
            opt.step(&mut [&mut model.p, &mut model.l], &[&grad.dp, &grad.dl]);
            step += 1;
            start = end;
        }
    }
    Ok(model)
}

/// Accuracy of a kernelized model on labeled data.
pub fn keca_accuracy(spec: KernelSpec, data: &Prepared, model: &EcaModel) -> f64 {
    let correct: usize = map_chunks(data.x.nrows(), |(a, b)| {
        (a..b)
            .filter(|&i| keca_predict(spec, data.x.row(i), model) == data.y[i])
            .count()
    })
    .into_iter()
    .sum();
    correct as f64 / data.x.nrows().max(1) as f64
}
