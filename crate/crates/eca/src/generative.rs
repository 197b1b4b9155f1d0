//! GECA: per-(eigenfeature, class) normal models over projections with a
//! categorical class prior. The mapping matrix gates which projections a
//! class explains; training relaxes the gate through the usual soft mapping
//! so the raw parameters keep receiving gradients, while reported
//! log-likelihoods and predictions use the rounded mapping.

use ndarray::{s, Array1, Array2, ArrayView2};
use std::fs;
use std::path::Path;

use crate::core::{ecmm_soft, normalize, EcaModel};
use crate::data::Prepared;
use crate::model_io::{self, JsonWriter};
use crate::objectives::{soft_mapping_derivative, PenaltyWeights};
use crate::parallel::map_chunks;
use crate::rng::{derive_rng, standard_normal};
use crate::trainer::{Optimizer, TrainConfig};
use crate::{EcaError, Result};

pub const SIGMA_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.8378770664093453;

/// ECA parameters plus the generative layer: per-(eigenfeature, class)
/// normal parameters and the class prior.
#[derive(Debug, Clone)]
pub struct GecaModel {
    pub eca: EcaModel,
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub phi: Array1<f64>,
}

impl GecaModel {
    pub fn new(eca: EcaModel, mu: Array2<f64>, sigma: Array2<f64>, phi: Array1<f64>) -> Result<Self> {
        let (m, l) = (eca.m(), eca.classes());
        if mu.dim() != (m, l) || sigma.dim() != (m, l) {
            return Err(EcaError::DimensionMismatch(format!(
                "mu/sigma must be {m}x{l}"
            )));
        }
        if phi.len() != l {
            return Err(EcaError::DimensionMismatch(format!("phi must have {l} entries")));
        }
        if (phi.sum() - 1.0).abs() > 1e-9 || phi.iter().any(|&p| p < 0.0) {
            return Err(EcaError::Config("phi must be a probability vector".into()));
        }
        let sigma = sigma.mapv(|v| v.max(SIGMA_FLOOR));
        Ok(GecaModel { eca, mu, sigma, phi })
    }

    pub fn m(&self) -> usize {
        self.eca.m()
    }

    pub fn classes(&self) -> usize {
        self.eca.classes()
    }
}

fn log_normal(v: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_FLOOR);
    let z = (v - mu) / s;
    -s.ln() - 0.5 * LN_2PI - 0.5 * z * z
}

/// Class frequencies. The largest entry absorbs the (at most 1 ulp) float
/// rounding so the vector sums to exactly 1.
pub fn fit_phi(labels: &[usize], classes: usize) -> Result<Array1<f64>> {
    if labels.is_empty() {
        return Err(EcaError::Config("cannot fit a prior to zero labels".into()));
    }
    let mut counts = vec![0u64; classes];
    for &y in labels {
        if y >= classes {
            return Err(EcaError::Config(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    let mut phi = Array1::from_iter(counts.iter().map(|&c| c as f64 / n));
    let gap = 1.0 - phi.sum();
    let argmax = phi
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    phi[argmax] += gap;
    Ok(phi)
}

/// Full-data log-likelihood under the rounded mapping:
/// sum_i [ sum_j hard_{j, y_i} log N(x_i^T P_j; mu, sigma) + log phi_{y_i} ].
pub fn geca_loglik(data: &Prepared, model: &GecaModel) -> f64 {
    let ecmm = model.eca.ecmm();
    let proj = data.x.dot(&model.eca.p);
    let mut total = 0.0;
    for (i, &y) in data.y.iter().enumerate() {
        for j in 0..model.m() {
            if ecmm.hard[[j, y]] == 1 {
                total += log_normal(proj[[i, j]], model.mu[[j, y]], model.sigma[[j, y]]);
            }
        }
        total += model.phi[y].max(crate::LOG_EPS).ln();
    }
    total
}

/// Gradients of the (negated, penalized) weighted training objective.
#[derive(Debug, Clone)]
pub struct GecaGradients {
    pub dp: Array2<f64>,
    pub dl: Array2<f64>,
    pub dmu: Array2<f64>,
    /// gradient with respect to log(sigma)
    pub dlog_sigma: Array2<f64>,
}

/// Responsibility-weighted negative log-likelihood with penalties, the
/// training objective shared by supervised GECA (one-hot weights) and the
/// UECA M-step (soft responsibilities). The mapping gate is the soft
/// relaxation; the phi term enters the value but not the gradients (phi has
/// a closed-form update).
pub fn weighted_loss(
    x: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    model: &GecaModel,
    w: &PenaltyWeights,
    data_scale: f64,
) -> f64 {
    let soft = ecmm_soft(&model.eca.l, model.eca.chi, model.eca.omega);
    let n = x.nrows();
    let data: f64 = map_chunks(n, |(a, b)| {
        let proj = x.slice(s![a..b, ..]).dot(&model.eca.p);
        let mut acc = 0.0;
        for i in 0..(b - a) {
            for z in 0..model.classes() {
                let wt = weights[[a + i, z]];
                if wt == 0.0 {
                    continue;
                }
                let mut term = model.phi[z].max(crate::LOG_EPS).ln();
                for j in 0..model.m() {
                    let g = log_normal(proj[[i, j]], model.mu[[j, z]], model.sigma[[j, z]]);
                    term += soft[[j, z]] * g;
                }
                acc -= wt * term;
            }
        }
        acc
    })
    .into_iter()
    .sum();
    data * data_scale
        + w.xi * crate::objectives::orthogonality_penalty(&model.eca.p)
        + w.gamma * crate::objectives::binarity_penalty(&model.eca.l, model.eca.omega)
}

pub fn weighted_loss_and_gradients(
    x: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    model: &GecaModel,
    w: &PenaltyWeights,
    data_scale: f64,
) -> (f64, GecaGradients) {
    let (m, l) = (model.m(), model.classes());
    let soft = ecmm_soft(&model.eca.l, model.eca.chi, model.eca.omega);
    let n = x.nrows();

    struct Partial {
        loss: f64,
        dp: Array2<f64>,
        dldot: Array2<f64>,
        dmu: Array2<f64>,
        dls: Array2<f64>,
    }

    let partials = map_chunks(n, |(a, b)| {
        let xs = x.slice(s![a..b, ..]);
        let proj = xs.dot(&model.eca.p);
        let rows = b - a;
        let mut loss = 0.0;
        let mut dldot = Array2::<f64>::zeros((m, l));
        let mut dmu = Array2::<f64>::zeros((m, l));
        let mut dls = Array2::<f64>::zeros((m, l));
        let mut dv = Array2::<f64>::zeros((rows, m));
        for i in 0..rows {
            for z in 0..l {
                let wt = weights[[a + i, z]];
                if wt == 0.0 {
                    continue;
                }
                loss -= wt * model.phi[z].max(crate::LOG_EPS).ln();
                for j in 0..m {
                    let sg = model.sigma[[j, z]].max(SIGMA_FLOOR);
                    let d = proj[[i, j]] - model.mu[[j, z]];
                    let g = -sg.ln() - 0.5 * LN_2PI - 0.5 * (d / sg) * (d / sg);
                    let gate = soft[[j, z]];
                    loss -= wt * gate * g;
                    dldot[[j, z]] -= wt * g;
                    dmu[[j, z]] -= wt * gate * d / (sg * sg);
                    // d/d log(sigma): -1 + (d/sg)^2, negated for the loss
                    dls[[j, z]] -= wt * gate * ((d / sg) * (d / sg) - 1.0);
                    dv[[i, j]] += wt * gate * d / (sg * sg);
                }
            }
        }
        let dp = xs.t().dot(&dv);
        Partial {
            loss,
            dp,
            dldot,
            dmu,
            dls,
        }
    });

    let mut data_loss = 0.0;
    let mut dp = Array2::<f64>::zeros((m, m));
    let mut dldot = Array2::<f64>::zeros((m, l));
    let mut dmu = Array2::<f64>::zeros((m, l));
    let mut dls = Array2::<f64>::zeros((m, l));
    for part in partials {
        data_loss += part.loss;
        dp += &part.dp;
        dldot += &part.dldot;
        dmu += &part.dmu;
        dls += &part.dls;
    }
    if data_scale != 1.0 {
        data_loss *= data_scale;
        dp.mapv_inplace(|v| v * data_scale);
        dldot.mapv_inplace(|v| v * data_scale);
        dmu.mapv_inplace(|v| v * data_scale);
        dls.mapv_inplace(|v| v * data_scale);
    }

    let mut dl = &dldot * &soft_mapping_derivative(&model.eca);
    if w.xi != 0.0 {
        let ptp = model.eca.p.t().dot(&model.eca.p);
        let mut r = -ptp;
        for i in 0..m {
            r[[i, i]] += 1.0;
        }
        dp.scaled_add(-4.0 * w.xi, &model.eca.p.dot(&r));
    }
    if w.gamma != 0.0 {
        let om = model.eca.omega;
        for ((j, k), g) in dl.indexed_iter_mut() {
            let two = 2.0 * om * model.eca.l[[j, k]];
            *g += w.gamma * (-4.0 * om) * (1.0 + two.cos()) * two.sin();
        }
    }

    let total = data_loss
        + w.xi * crate::objectives::orthogonality_penalty(&model.eca.p)
        + w.gamma * crate::objectives::binarity_penalty(&model.eca.l, model.eca.omega);
    (
        total,
        GecaGradients {
            dp,
            dl,
            dmu,
            dlog_sigma: dls,
        },
    )
}

fn one_hot_weights(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

/// Empirical per-class projection moments under the current P; the starting
/// point for mu and sigma.
pub(crate) fn moment_init(
    x: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    p: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let proj = x.dot(p);
    let (m, l) = (p.ncols(), weights.ncols());
    let mut mu = Array2::<f64>::zeros((m, l));
    let mut var = Array2::<f64>::zeros((m, l));
    let mut mass = vec![0.0f64; l];
    for i in 0..x.nrows() {
        for z in 0..l {
            mass[z] += weights[[i, z]];
        }
    }
    for j in 0..m {
        for z in 0..l {
            if mass[z] < 1e-12 {
                mu[[j, z]] = 0.0;
                var[[j, z]] = 1.0;
                continue;
            }
            let mut s = 0.0;
            for i in 0..x.nrows() {
                s += weights[[i, z]] * proj[[i, j]];
            }
            let mean = s / mass[z];
            let mut v = 0.0;
            for i in 0..x.nrows() {
                let d = proj[[i, j]] - mean;
                v += weights[[i, z]] * d * d;
            }
            mu[[j, z]] = mean;
            var[[j, z]] = (v / mass[z]).max(SIGMA_FLOOR * SIGMA_FLOOR);
        }
    }
    (mu, var.mapv(f64::sqrt))
}

/// Joint gradient ascent on P, L, mu and log(sigma); phi by closed form.
pub fn train_geca(data: &Prepared, config: &TrainConfig) -> Result<GecaModel> {
    let n = data.x.nrows();
    if n == 0 {
        return Err(EcaError::Config("training set is empty".into()));
    }
    let (m, l) = (data.x.ncols(), data.classes);
    let eca = crate::trainer::init_model(m, l, config.seed, config.chi, config.omega)?;
    let weights = one_hot_weights(&data.y, l);
    let (mu, sigma) = moment_init(data.x.view(), weights.view(), &eca.p);
    let phi = fit_phi(&data.y, l)?;
    let mut model = GecaModel::new(eca, mu, sigma, phi)?;
    let mut log_sigma = model.sigma.mapv(f64::ln);

    let mut opt = Optimizer::new(
        config.optimizer,
        &[(m, m), (m, l), (m, l), (m, l)],
        config.learning_rate,
    );
    let batch = crate::trainer::effective_batch_size(n, config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = derive_rng(config.seed, "shuffle");
    let mut batch_x = Array2::<f64>::zeros((batch, m));
    let mut batch_w = Array2::<f64>::zeros((batch, l));
    let batches_per_epoch = n.div_ceil(batch);
    let total_steps = (config.epochs * batches_per_epoch) as f64;
    let mut step = 0usize;

    for _ in 0..config.epochs {
        crate::trainer::shuffle_indices(&mut order, &mut shuffle_rng);
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let take = end - start;
            for (row, &src) in order[start..end].iter().enumerate() {
                batch_x.slice_mut(s![row, ..]).assign(&data.x.row(src));
                batch_w.slice_mut(s![row, ..]).assign(&weights.row(src));
            }
            model.sigma = log_sigma.mapv(f64::exp);
            let (_, grad) = weighted_loss_and_gradients(
                batch_x.slice(s![..take, ..]),
                batch_w.slice(s![..take, ..]),
                &model,
                &config.weights,
                1.0 / take as f64,
            );
            opt.set_lr(crate::trainer::cosine_lr(
                config.learning_rate,
                step as f64,
                total_steps,
            ));
            opt.step(
                &mut [
                    &mut model.eca.p,
                    &mut model.eca.l,
                    &mut model.mu,
                    &mut log_sigma,
                ],
                &[&grad.dp, &grad.dl, &grad.dmu, &grad.dlog_sigma],
            );
            let floor = SIGMA_FLOOR.ln();
            log_sigma.mapv_inplace(|v| v.max(floor));
            step += 1;
            start = end;
        }
    }
    model.sigma = log_sigma.mapv(f64::exp);
    Ok(model)
}

/// Generative prediction: argmax over classes of the gated log-density plus
/// the log prior; ties to the lowest index.
pub fn geca_predict(x: ndarray::ArrayView1<f64>, model: &GecaModel) -> usize {
    let ecmm = model.eca.ecmm();
    let proj = x.dot(&model.eca.p);
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..model.classes() {
        let mut score = model.phi[k].max(crate::LOG_EPS).ln();
        for j in 0..model.m() {
            if ecmm.hard[[j, k]] == 1 {
                score += log_normal(proj[j], model.mu[[j, k]], model.sigma[[j, k]]);
            }
        }
        if score > best_score {
            best_score = score;
            best = k;
        }
    }
    best
}

/// Draw one unit-norm sample of a class: coefficients from the gated
/// per-eigenfeature normals, mixed through P, then normalized.
pub fn geca_sample(class: usize, model: &GecaModel, seed: u64) -> Result<Array1<f64>> {
    let ecmm = model.eca.ecmm();
    if class >= model.classes() {
        return Err(EcaError::Config(format!(
            "class {class} out of range ({} classes)",
            model.classes()
        )));
    }
    if (0..model.m()).all(|j| ecmm.hard[[j, class]] == 0) {
        return Err(EcaError::NoMappedEigenfeatures(class));
    }
    let mut rng = derive_rng(seed, "geca-sample");
    let mut coeff = Array1::<f64>::zeros(model.m());
    for j in 0..model.m() {
        if ecmm.hard[[j, class]] == 1 {
            coeff[j] = model.mu[[j, class]]
                + model.sigma[[j, class]].max(SIGMA_FLOOR) * standard_normal(&mut rng);
        }
    }
    let mixed = model.eca.p.dot(&coeff);
    normalize(mixed.view())
}

pub fn save_geca(model: &GecaModel, path: &Path) -> Result<()> {
    fs::write(path, render_geca(model))?;
    Ok(())
}

pub fn render_geca(model: &GecaModel) -> String {
    let mut w = JsonWriter::new();
    w.field_u64("format_version", model_io::FORMAT_VERSION);
    w.field_u64("m", model.m() as u64);
    w.field_u64("l", model.classes() as u64);
    w.field_f64("chi", model.eca.chi);
    w.field_f64("omega", model.eca.omega);
    w.field_matrix("P", &model.eca.p);
    w.field_matrix("L", &model.eca.l);
    w.field_matrix("mu", &model.mu);
    w.field_matrix("sigma", &model.sigma);
    let phi: Vec<f64> = model.phi.to_vec();
    w.field_vector("phi", &phi);
    w.finish()
}

pub fn load_geca(path: &Path) -> Result<GecaModel> {
    let text = fs::read_to_string(path)?;
    let doc = model_io::parse_document(&text)?;
    geca_from_doc(&doc)
}

pub(crate) fn geca_from_doc(doc: &serde_json::Value) -> Result<GecaModel> {
    let eca = crate::trainer::model_from_doc(doc)?;
    let (m, l) = (eca.m(), eca.classes());
    let mu = model_io::get_matrix(doc, "mu", m, l)?;
    let sigma = model_io::get_matrix(doc, "sigma", m, l)?;
    let phi = model_io::get_vector(doc, "phi", l)?;
    GecaModel::new(eca, mu, sigma, phi)
}
