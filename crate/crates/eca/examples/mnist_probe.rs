use eca::data::{load_idx, preprocess, subsample, PrepareOptions, ScaleKind};
use eca::objectives::{Objective, PenaltyWeights};
use eca::trainer::{evaluate, train, TrainConfig};
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let chi: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let objective = match args.get(4).map(|s| s.as_str()).unwrap_or("aeca") {
        "veca" => Objective::Veca,
        _ => Objective::Aeca,
    };
    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(128);
    let ntrain: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(20_000);

    let dir = Path::new("data/mnist");
    let train_raw = load_idx(
        &dir.join("train-images-idx3-ubyte.gz"),
        &dir.join("train-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let test_raw = load_idx(
        &dir.join("t10k-images-idx3-ubyte.gz"),
        &dir.join("t10k-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let opts = PrepareOptions { scale: ScaleKind::Divide255, add_aux_dim: false };
    let train_all = preprocess(&train_raw, &opts).unwrap();
    let test = preprocess(&test_raw, &opts).unwrap();
    let tr = if ntrain >= train_all.x.nrows() { train_all } else { subsample(&train_all, ntrain, 1).unwrap() };

    let config = TrainConfig {
        epochs: 12,
        batch_size: batch,
        learning_rate: lr,
        seed: 5,
        objective,
        chi,
        weights: PenaltyWeights {
            xi: args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0),
            gamma,
            ..PenaltyWeights::default()
        },
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let out = train(&tr, &config).unwrap();
    let secs = t1.elapsed().as_secs_f64();
    let rep = evaluate(&test, &out.model);
    let ecmm = out.model.ecmm();
    let pes = eca::analysis::pure_eigenfeatures(&ecmm).len();
    let stats = eca::analysis::model_stats(&ecmm).unwrap();
    let unmapped = stats.overlap_histogram.get(&0).copied().unwrap_or(0);
    let multi: usize = stats.overlap_histogram.iter().filter(|(k, _)| **k >= 2).map(|(_, c)| c).sum();
    let xi: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let _ = xi;
    println!("{objective:?} g={gamma} lr={lr} chi={chi} b={batch} n={ntrain} xi={}: acc {:.4} ortho {:.3} PEs {pes} unmapped {unmapped} multi {multi} final-loss {:.3} in {:.0}s",
        config.weights.xi, rep.accuracy, out.ortho_residual, out.loss_history.last().unwrap(), secs);
}
