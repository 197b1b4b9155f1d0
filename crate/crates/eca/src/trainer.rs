//! Parameter initialization, the mini-batch gradient-descent loop,
//! evaluation, and model serialization.

use ndarray::{s, Array2};
use std::fs;
use std::path::Path;

use crate::core::{argmax, class_probabilities_from, collapse_matrix, EcaModel, PmfMode};
use crate::data::Prepared;
use crate::linalg::{orthogonality_residual, qr_orthogonal};
use crate::model_io::{self, JsonWriter};
use crate::objectives::{Batch, Objective, PenaltyWeights};
use crate::parallel::map_chunks;
use crate::rng::{derive_rng, standard_normal, uniform_in};
use crate::{EcaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub objective: Objective,
    pub weights: PenaltyWeights,
    pub chi: f64,
    pub omega: f64,
    pub prob_mode: PmfMode,
    /// Replace P by its QR orthogonal factor after training (analysis use).
    pub reorthogonalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 42,
            objective: Objective::Veca,
            weights: PenaltyWeights::default(),
            chi: 10.0,
            omega: std::f64::consts::FRAC_PI_2,
            prob_mode: PmfMode::Modified,
            reorthogonalize: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(EcaError::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(EcaError::Config("learning_rate must be positive".into()));
        }
        if self.chi <= 0.0 || self.omega <= 0.0 {
            return Err(EcaError::Config("chi and omega must be positive".into()));
        }
        Ok(())
    }
}

/// A finished run: the model, one loss entry per epoch, and the final
/// orthogonality residual ||I - P^T P||_F.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EcaModel,
    pub loss_history: Vec<f64>,
    pub ortho_residual: f64,
}

/// Accuracy and a column-normalized confusion matrix; classes with no
/// validation support keep an all-zero column and are listed separately.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Array2<f64>,
    pub per_class_counts: Vec<usize>,
    pub empty_classes: Vec<usize>,
}

/// Adam with the usual defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **param)
                .and(&mut *m)
                .and(&mut *v)
                .and(*grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Plain gradient descent.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        for (param, grad) in params.iter_mut().zip(grads) {
            param.scaled_add(-self.lr, grad);
        }
    }
}

pub(crate) enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub(crate) fn new(kind: OptimizerKind, shapes: &[(usize, usize)], lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(shapes, lr)),
        }
    }

    pub(crate) fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

/// Cosine decay from the configured rate down to 1/20th of it across the
/// whole run.
pub(crate) fn cosine_lr(lr0: f64, step: f64, total: f64) -> f64 {
    let floor = lr0 / 20.0;
    let t = (step / total.max(1.0)).clamp(0.0, 1.0);
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Seeded initialization: P is the orthogonal factor of a QR decomposition
/// of a standard-normal matrix, L is uniform in (-0.5, 0.5).
pub fn init_model(m: usize, l: usize, seed: u64, chi: f64, omega: f64) -> Result<EcaModel> {
    if m == 0 || l == 0 {
        return Err(EcaError::Config("m and l must be at least 1".into()));
    }
    let mut rng = derive_rng(seed, "init");
    let g = Array2::from_shape_fn((m, m), |_| standard_normal(&mut rng));
    let p = qr_orthogonal(&g);
    let lmat = Array2::from_shape_fn((m, l), |_| uniform_in(&mut rng, -0.5, 0.5));
    EcaModel::new(p, lmat, chi, omega)
}

/// Shuffle indices in place with the shared Fisher-Yates used by every
/// epoch; the rng stream carries across epochs so runs are reproducible.
pub(crate) fn shuffle_indices(idx: &mut [usize], rng: &mut rand_chacha::ChaCha12Rng) {
    use rand::Rng;
    for i in (1..idx.len()).rev() {
        let j = (rng.gen::<u64>() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
}

pub(crate) fn effective_batch_size(n: usize, configured: usize) -> usize {
    if n <= 2000 {
        n
    } else {
        configured.min(n)
    }
}

/// Mini-batch gradient descent on the configured objective.
pub fn train(data: &Prepared, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = data.x.nrows();
    if n == 0 {
        return Err(EcaError::Config("training set is empty".into()));
    }
    let m = data.x.ncols();
    let classes = data.classes;
    if let Some(&bad) = data.y.iter().find(|&&y| y >= classes) {
        return Err(EcaError::Config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut model = init_model(m, classes, config.seed, config.chi, config.omega)?;
    let mut opt = Optimizer::new(
        config.optimizer,
        &[(m, m), (m, classes)],
        config.learning_rate,
    );

    let batch_size = effective_batch_size(n, config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = derive_rng(config.seed, "shuffle");

    let mut history: Vec<f64> = Vec::with_capacity(config.epochs);
    let mut batch_x = Array2::<f64>::zeros((batch_size, m));
    let mut batch_y = vec![0usize; batch_size];
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as f64;
    let mut step_idx = 0usize;

    for epoch in 0..config.epochs {
        shuffle_indices(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
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
                classes,
            );
            let (loss, grad) = crate::objectives::loss_and_gradients_scaled(
                batch,
                &model,
                &config.weights,
                config.objective,
                1.0 / take as f64,
            );
            opt.set_lr(cosine_lr(config.learning_rate, step_idx as f64, total_steps));
            opt.step(&mut [&mut model.p, &mut model.l], &[&grad.dp, &grad.dl]);
            step_idx += 1;
            epoch_loss += loss;
            batches += 1;
            start = end;
        }
        let mean = epoch_loss / batches as f64;
        if let Some(&prev) = history.last() {
            if mean > 1.1 * prev && prev.is_finite() {
                log::warn!(
                    "epoch {epoch}: mean loss rose from {prev:.6} to {mean:.6} (>10%)"
                );
            }
        }
        history.push(mean);
    }

    if config.reorthogonalize {
        model.p = qr_orthogonal(&model.p);
    }
    let ortho_residual = orthogonality_residual(&model.p);
    Ok(TrainOutcome {
        model,
        loss_history: history,
        ortho_residual,
    })
}

/// Batch predictions under the modified probability mode.
pub fn predict_batch(data: &Prepared, model: &EcaModel) -> Vec<usize> {
    let ecmm = model.ecmm();
    let chunks = map_chunks(data.x.nrows(), |(a, b)| {
        let c = collapse_matrix(data.x.slice(s![a..b, ..]), &model.p);
        (a..b)
            .map(|i| {
                let probs = class_probabilities_from(c.row(i - a), &ecmm, PmfMode::Modified);
                argmax(probs.view())
            })
            .collect::<Vec<_>>()
    });
    chunks.into_iter().flatten().collect()
}

/// Accuracy and the column-normalized confusion matrix on labeled data.
pub fn evaluate(data: &Prepared, model: &EcaModel) -> EvalReport {
    let preds = predict_batch(data, model);
    report_from_predictions(&preds, &data.y, data.classes)
}

pub fn report_from_predictions(preds: &[usize], truth: &[usize], classes: usize) -> EvalReport {
    let n = truth.len();
    let mut counts = Array2::<f64>::zeros((classes, classes));
    let mut per_class = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &t) in preds.iter().zip(truth) {
        counts[[p, t]] += 1.0;
        per_class[t] += 1;
        if p == t {
            correct += 1;
        }
    }
    let mut empty = Vec::new();
    let mut confusion = counts;
    for j in 0..classes {
        if per_class[j] == 0 {
            empty.push(j);
            continue;
        }
        let total = per_class[j] as f64;
        for i in 0..classes {
            confusion[[i, j]] /= total;
        }
    }
    let accuracy = correct as f64 / n.max(1) as f64;
    // accuracy must equal 1 minus the support-weighted off-diagonal mass
    let off: f64 = (0..classes)
        .map(|j| (per_class[j] as f64 / n.max(1) as f64) * (1.0 - confusion[[j, j]]))
        .sum();
    debug_assert!(
        (accuracy - (1.0 - off)).abs() < 1e-9,
        "confusion/accuracy identity violated"
    );
    EvalReport {
        accuracy,
        confusion,
        per_class_counts: per_class,
        empty_classes: empty,
    }
}

/// Write a model to a versioned JSON file with bit-exact numbers.
pub fn save_model(model: &EcaModel, path: &Path) -> Result<()> {
    fs::write(path, render_model(model))?;
    Ok(())
}

pub fn render_model(model: &EcaModel) -> String {
    let mut w = JsonWriter::new();
    w.field_u64("format_version", model_io::FORMAT_VERSION);
    w.field_u64("m", model.m() as u64);
    w.field_u64("l", model.classes() as u64);
    w.field_f64("chi", model.chi);
    w.field_f64("omega", model.omega);
    w.field_matrix("P", &model.p);
    w.field_matrix("L", &model.l);
    w.finish()
}

/// Read a model file written by [`save_model`].
pub fn load_model(path: &Path) -> Result<EcaModel> {
    let text = fs::read_to_string(path)?;
    let doc = model_io::parse_document(&text)?;
    model_from_doc(&doc)
}

pub(crate) fn model_from_doc(doc: &serde_json::Value) -> Result<EcaModel> {
    let m = model_io::get_u64(doc, "m")? as usize;
    let l = model_io::get_u64(doc, "l")? as usize;
    let chi = model_io::get_f64(doc, "chi")?;
    let omega = model_io::get_f64(doc, "omega")?;
    let p = model_io::get_matrix(doc, "P", m, m)?;
    let lmat = model_io::get_matrix(doc, "L", m, l)?;
    EcaModel::new(p, lmat, chi, omega)
}

/// Per-epoch losses as a two-column CSV.
pub fn render_loss_history(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, v) in history.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", model_io::fmt_f64(*v)));
    }
    out
}

/// Evaluation report as CSV: accuracy line, per-class counts, then the
/// column-normalized confusion matrix.
pub fn render_eval_report(report: &EvalReport) -> String {
    let l = report.per_class_counts.len();
    let mut out = String::new();
    out.push_str(&format!("accuracy,{:.6}\n", report.accuracy));
    out.push_str("class,support\n");
    for (k, c) in report.per_class_counts.iter().enumerate() {
        out.push_str(&format!("{k},{c}\n"));
    }
    out.push_str("confusion");
    for j in 0..l {
        out.push_str(&format!(",true_{j}"));
    }
    out.push('\n');
    for i in 0..l {
        out.push_str(&format!("pred_{i}"));
        for j in 0..l {
            out.push_str(&format!(",{:.6}", report.confusion[[i, j]]));
        }
        out.push('\n');
    }
    out
}
