use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use contrast_lab::{
    gaussian_matrix, grad_params, spectral_norm, total_loss_exact, Dataset, EncodedBatch, Estimation, HyperParams, Params,
    RngState, Shape,
};

fn problem(m: usize) -> (Dataset, Params, Params) {
    let root = RngState::new(1);
    let data = Dataset::generate_separated(&root.child("data"), 8, 16, 0.5, None).unwrap();
    let shape = Shape::new(3, m, 32, 16).unwrap();
    (
        data,
        Params::init(&root.child("query"), shape).unwrap(),
        Params::init(&root.child("key"), shape).unwrap(),
    )
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_trace");
    for m in [256, 1024] {
        let (data, q, _) = problem(m);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| q.forward_trace(black_box(data.point(0))).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("grad_params");
    group.sample_size(20);
    let hp = HyperParams {
        k: 2,
        eta: 0.0,
        gamma: 0.0,
        iterations: 1,
        epsilon: 0.5,
        estimation: Estimation::default(),
    };
    for m in [256, 512] {
        let (data, q, k) = problem(m);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| grad_params(black_box(&q), black_box(&k), &data, &hp).unwrap())
        });
    }
    group.finish();
}

fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral_norm");
    for m in [128, 512] {
        let a = gaussian_matrix(&RngState::new(2), m, m, 1.0 / m as f64).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| spectral_norm(black_box(&a), 1e-8).unwrap())
        });
    }
    group.finish();
}

fn exact_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("total_loss_exact");
    for (n, k) in [(8, 2), (10, 4), (14, 6)] {
        let mut s = RngState::new(3).sampler();
        let mut draw = || (0..n).map(|_| (0..32).map(|_| s.standard_normal()).collect()).collect::<Vec<Vec<f64>>>();
        let batch = EncodedBatch::from_outputs(draw(), draw()).unwrap();
        group.bench_with_input(BenchmarkId::new(format!("n{n}"), k), &k, |b, &k| {
            b.iter(|| total_loss_exact(black_box(&batch), k, 1_000_000).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradients, spectral, exact_loss);
criterion_main!(benches);
