//! UECA: EM-style clustering over latent class assignments. The E-step
//! scores each latent class by the ECA class probability times the prior;
//! the M-step runs a bounded number of safeguarded gradient steps on the
//! responsibility-weighted generative objective, with the prior updated in
//! closed form.

use ndarray::{Array1, Array2, ArrayView2};

use crate::core::{class_probabilities_from, collapse_matrix, Ecmm, PmfMode};
use crate::generative::{
    moment_init, weighted_loss, weighted_loss_and_gradients, GecaModel,
};
use crate::objectives::PenaltyWeights;
use crate::parallel::map_chunks;
use crate::rng::{derive_rng, dirichlet_uniform};
use crate::trainer::{init_model, Optimizer, OptimizerKind};
use crate::{EcaError, Result};

/// Knobs of the EM loop.
#[derive(Debug, Clone)]
pub struct UecaConfig {
    pub max_rounds: usize,
    pub tol: f64,
    /// gradient steps per M-step (generalized EM)
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub chi: f64,
    pub omega: f64,
    pub weights: PenaltyWeights,
}

impl Default for UecaConfig {
    fn default() -> Self {
        UecaConfig {
            max_rounds: 200,
            tol: 1e-6,
            inner_steps: 10,
            learning_rate: 0.02,
            seed: 42,
            chi: 10.0,
            omega: std::f64::consts::FRAC_PI_2,
            weights: PenaltyWeights::default(),
        }
    }
}

/// Model plus the current responsibilities.
#[derive(Debug, Clone)]
pub struct UecaState {
    pub model: GecaModel,
    pub responsibilities: Array2<f64>,
    pub l_tilde: usize,
}

/// Finished clustering run.
#[derive(Debug, Clone)]
pub struct UecaOutcome {
    pub state: UecaState,
    pub assignments: Vec<usize>,
    pub elbo_history: Vec<f64>,
    pub rounds: usize,
}

/// E-step scoring by projection probabilities: responsibilities
/// proportional to the ECA class probability of each latent class times the
/// prior, normalized per row. Rows that score zero everywhere fall back to
/// the prior. The fit loop itself uses [`posterior_estep`], the exact
/// posterior of the generative model, which keeps the bound monotone; this
/// lighter scoring stays available for inspection.
pub fn ueca_estep(x: ArrayView2<f64>, state: &UecaState) -> Array2<f64> {
    let model = &state.model;
    let ecmm = model.eca.ecmm();
    responsibilities_from(x, &model.eca.p, &ecmm, &model.phi)
}

fn responsibilities_from(
    x: ArrayView2<f64>,
    p: &Array2<f64>,
    ecmm: &Ecmm,
    phi: &Array1<f64>,
) -> Array2<f64> {
    let n = x.nrows();
    let l = phi.len();
    let chunks = map_chunks(n, |(a, b)| {
        let c = collapse_matrix(x.slice(ndarray::s![a..b, ..]), p);
        let mut out = Array2::<f64>::zeros((b - a, l));
        for i in 0..(b - a) {
            let probs = class_probabilities_from(c.row(i), ecmm, PmfMode::Unmodified);
            let mut total = 0.0;
            for z in 0..l {
                let v = probs[z] * phi[z];
                out[[i, z]] = v;
                total += v;
            }
            if total < 1e-300 {
                for z in 0..l {
                    out[[i, z]] = phi[z];
                }
                let ps: f64 = phi.sum();
                for z in 0..l {
                    out[[i, z]] /= ps;
                }
            } else {
                for z in 0..l {
                    out[[i, z]] /= total;
                }
            }
        }
        out
    });
    let mut out = Array2::<f64>::zeros((n, l));
    let mut row = 0;
    for chunk in chunks {
        for r in chunk.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    out
}

/// Exact posterior of the generative model: softmax over
/// log phi_z + sum_j soft_jz log N(x^T P_j; mu_jz, sigma_jz).
pub fn posterior_estep(x: ArrayView2<f64>, model: &GecaModel) -> Array2<f64> {
    let soft = crate::core::ecmm_soft(&model.eca.l, model.eca.chi, model.eca.omega);
    let (m, l) = (model.m(), model.classes());
    let n = x.nrows();
    let chunks = map_chunks(n, |(a, b)| {
        let proj = x.slice(ndarray::s![a..b, ..]).dot(&model.eca.p);
        let mut out = Array2::<f64>::zeros((b - a, l));
        for i in 0..(b - a) {
            let mut scores = vec![0.0f64; l];
            for (z, slot) in scores.iter_mut().enumerate() {
                let mut acc = model.phi[z].max(crate::LOG_EPS).ln();
                for j in 0..m {
                    let sg = model.sigma[[j, z]].max(crate::generative::SIGMA_FLOOR);
                    let d = (proj[[i, j]] - model.mu[[j, z]]) / sg;
                    acc += soft[[j, z]] * (-sg.ln() - 0.9189385332046727 - 0.5 * d * d);
                }
                *slot = acc;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for z in 0..l {
                let e = (scores[z] - mx).exp();
                out[[i, z]] = e;
                total += e;
            }
            for z in 0..l {
                out[[i, z]] /= total;
            }
        }
        out
    });
    let mut out = Array2::<f64>::zeros((n, l));
    let mut row = 0;
    for chunk in chunks {
        for r in chunk.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    out
}

/// Evidence lower bound: responsibility-weighted joint log-likelihood of the
/// generative model minus the penalties, plus the responsibility entropy.
pub fn elbo(
    x: ArrayView2<f64>,
    responsibilities: ArrayView2<f64>,
    model: &GecaModel,
    w: &PenaltyWeights,
) -> f64 {
    let weighted = -weighted_loss(x, responsibilities, model, w, 1.0);
    let entropy: f64 = responsibilities
        .iter()
        .map(|&q| if q > 1e-300 { -q * q.ln() } else { 0.0 })
        .sum();
    weighted + entropy
}

/// M-step: closed-form prior update from responsibility column means, then
/// up to `inner_steps` gradient steps on the weighted objective. Steps that
/// would lower the ELBO are rolled back with a halved rate, so the M-step
/// never decreases it.
pub fn ueca_mstep(
    x: ArrayView2<f64>,
    responsibilities: ArrayView2<f64>,
    state: &mut UecaState,
    config: &UecaConfig,
) -> Result<()> {
    let n = x.nrows();
    let l = state.l_tilde;
    // prior = column means (exact argmax of the weighted prior term)
    let mut phi = Array1::<f64>::zeros(l);
    for z in 0..l {
        phi[z] = responsibilities.column(z).sum() / n as f64;
    }
    let total = phi.sum();
    if total > 0.0 {
        phi.mapv_inplace(|v| v / total);
    }
    state.model.phi = phi;

    let m = state.model.m();
    let mut log_sigma = state.model.sigma.mapv(f64::ln);
    let mut lr = config.learning_rate;
    let scale = 1.0 / n as f64;
    for _ in 0..config.inner_steps {
        let (before, grad) = weighted_loss_and_gradients(
            x,
            responsibilities,
            &state.model,
            &config.weights,
            scale,
        );
        let snapshot = (
            state.model.eca.p.clone(),
            state.model.eca.l.clone(),
            state.model.mu.clone(),
            log_sigma.clone(),
        );
        let mut accepted = false;
        for _ in 0..8 {
            let mut opt = Optimizer::new(
                OptimizerKind::Sgd,
                &[(m, m), (m, l), (m, l), (m, l)],
                lr,
            );
            opt.step(
                &mut [
                    &mut state.model.eca.p,
                    &mut state.model.eca.l,
                    &mut state.model.mu,
                    &mut log_sigma,
                ],
                &[&grad.dp, &grad.dl, &grad.dmu, &grad.dlog_sigma],
            );
            let floor = crate::generative::SIGMA_FLOOR.ln();
            log_sigma.mapv_inplace(|v| v.max(floor));
            state.model.sigma = log_sigma.mapv(f64::exp);
            let after = weighted_loss(x, responsibilities, &state.model, &config.weights, scale);
            if after <= before + 1e-12 {
                accepted = true;
                break;
            }
            // roll back and retry shorter
            state.model.eca.p = snapshot.0.clone();
            state.model.eca.l = snapshot.1.clone();
            state.model.mu = snapshot.2.clone();
            log_sigma = snapshot.3.clone();
            state.model.sigma = log_sigma.mapv(f64::exp);
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    state.model.sigma = log_sigma.mapv(f64::exp);
    Ok(())
}

/// Alternate E and M steps until the ELBO moves less than `tol` or the round
/// budget runs out; assignments are the argmax responsibilities.
pub fn ueca_fit(x: ArrayView2<f64>, l_tilde: usize, config: &UecaConfig) -> Result<UecaOutcome> {
    if l_tilde == 0 {
        return Err(EcaError::Config("need at least one latent class".into()));
    }
    let n = x.nrows();
    if n == 0 {
        return Err(EcaError::Config("empty dataset".into()));
    }
    let m = x.ncols();

    // seeded Dirichlet(1,...,1) responsibilities to break symmetry
    let mut rng = derive_rng(config.seed, "ueca-init");
    let mut responsibilities = Array2::<f64>::zeros((n, l_tilde));
    for mut row in responsibilities.rows_mut() {
        let draw = dirichlet_uniform(&mut rng, l_tilde);
        for (slot, v) in row.iter_mut().zip(draw) {
            *slot = v;
        }
    }

    let mut eca = init_model(m, l_tilde, config.seed, config.chi, config.omega)?;
    // start with every gate open: latent classes that explain different
    // numbers of projections have incomparable likelihoods, and the class
    // with more open gates swallows all responsibility
    eca.l.fill(std::f64::consts::FRAC_PI_2 / config.omega);
    let (_, sigma) = moment_init(x, responsibilities.view(), &eca.p);
    // seed each latent class's means from one random sample's projections;
    // symmetric starts (all classes at the pooled moments) are a fixed
    // point of EM and never separate
    let proj = x.dot(&eca.p);
    let mut mu = Array2::<f64>::zeros((m, l_tilde));
    {
        use rand::Rng;
        let mut pick_rng = derive_rng(config.seed, "ueca-mean-seeds");
        for z in 0..l_tilde {
            let i = (pick_rng.gen::<u64>() % n as u64) as usize;
            for j in 0..m {
                mu[[j, z]] = proj[[i, j]];
            }
        }
    }
    let phi = Array1::from_elem(l_tilde, 1.0 / l_tilde as f64);
    let model = GecaModel::new(eca, mu, sigma, phi)?;
    let mut state = UecaState {
        model,
        responsibilities,
        l_tilde,
    };

    let mut history = Vec::new();
    let mut rounds = 0;
    for round in 0..config.max_rounds {
        rounds = round + 1;
        // M first on the initial Dirichlet draw, then alternate from E
        ueca_mstep(x, state.responsibilities.clone().view(), &mut state, config)?;
        let q = posterior_estep(x, &state.model);
        state.responsibilities = q;
        let value = elbo(
            x,
            state.responsibilities.view(),
            &state.model,
            &config.weights,
        );
        let done = history
            .last()
            .is_some_and(|&prev: &f64| (value - prev).abs() < config.tol);
        history.push(value);
        if done || l_tilde == 1 {
            break;
        }
    }

    let assignments = state
        .responsibilities
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (z, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = z;
                }
            }
            best
        })
        .collect();
    Ok(UecaOutcome {
        state,
        assignments,
        elbo_history: history,
        rounds,
    })
}
