use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use quar_bench::fixture;
use quar_core::flows::SeriesEstimatorConfig;
use quar_core::training::nll_and_gradients;
use quar_core::RngState;

fn log_prob(c: &mut Criterion) {
    let f = fixture(2, 4, 64, 64, 0).unwrap();
    let mut group = c.benchmark_group("log_prob_batch64");
    group.sample_size(20);
    group.bench_function("quar_exact", |b| b.iter(|| f.quar.log_prob_batch(&f.batch).unwrap()));
    for terms in [5, 20] {
        let cfg = SeriesEstimatorConfig::truncated(terms);
        group.bench_with_input(BenchmarkId::new("residual_series", terms), &cfg, |b, cfg| {
            let mut rng = RngState::new(1);
            b.iter(|| f.batch.iter().map(|x| f.baseline.log_prob_series(x, cfg, &mut rng).unwrap()).sum::<f64>())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("nll_gradients_batch64");
    group.sample_size(10);
    for flows in [1, 4] {
        let f = fixture(2, flows, 64, 64, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("quar", flows), &f, |b, f| {
            b.iter(|| nll_and_gradients(&f.quar, &f.batch).unwrap().0)
        });
        group.bench_with_input(BenchmarkId::new("residual_exact", flows), &f, |b, f| {
            b.iter(|| nll_and_gradients(&f.baseline, &f.batch).unwrap().0)
        });
    }
    group.finish();
}

criterion_group!(benches, log_prob, gradients);
criterion_main!(benches);
