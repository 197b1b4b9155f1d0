//! Parallel vs sequential batch evaluation at a few model scales. The
//! crate's default build fans per-sample work out with rayon; this suite
//! pins both modes side by side (run with --no-default-features to confirm
//! the sequential-only build matches the forced-sequential numbers).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eca::bench_support::gradients_forced;
use eca::objectives::{Batch, Objective, PenaltyWeights};
use eca::rng::{derive_rng, standard_normal, uniform_in};
use eca::EcaModel;
use ndarray::Array2;

fn instance(m: usize, l: usize, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>, EcaModel) {
    let mut rng = derive_rng(seed, "bench");
    let mut x = Array2::from_shape_fn((n, m), |_| standard_normal(&mut rng));
    for mut row in x.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    let labels: Vec<usize> = (0..n).map(|i| i % l).collect();
    let p = Array2::from_shape_fn((m, m), |_| standard_normal(&mut rng));
    let lmat = Array2::from_shape_fn((m, l), |_| uniform_in(&mut rng, -0.5, 0.5));
    let model = EcaModel::new(p, lmat, 10.0, std::f64::consts::FRAC_PI_2).unwrap();
    (x, labels, model)
}

fn bench_gradients(c: &mut Criterion) {
    let w = PenaltyWeights::default();
    for (m, l, n) in [(64usize, 4usize, 512usize), (256, 10, 512)] {
        let (x, labels, model) = instance(m, l, n, 7);
        let batch = Batch::new(x.view(), &labels, l);
        let mut group = c.benchmark_group(format!("veca_gradients_m{m}_n{n}"));
        for (name, parallel) in [("sequential", false), ("parallel", true)] {
            if parallel && !cfg!(feature = "parallel") {
                continue;
            }
            group.bench_with_input(BenchmarkId::from_parameter(name), &parallel, |b, &par| {
                b.iter(|| gradients_forced(batch, &model, &w, Objective::Veca, par))
            });
        }
        group.finish();
    }
}

fn bench_losses(c: &mut Criterion) {
    let w = PenaltyWeights::default();
    let (x, labels, model) = instance(128, 10, 1024, 9);
    let batch = Batch::new(x.view(), &labels, 10);
    let mut group = c.benchmark_group("aeca_gradients_m128_n1024");
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        if parallel && !cfg!(feature = "parallel") {
            continue;
        }
        group.bench_with_input(BenchmarkId::from_parameter(name), &parallel, |b, &par| {
            b.iter(|| gradients_forced(batch, &model, &w, Objective::Aeca, par))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradients, bench_losses);
criterion_main!(benches);
