use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hsq_bench::random;
use hsq_core::numerics::ops;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let (a, b) = (random(n, n, 1), random(n, n, 2));
        g.throughput(Throughput::Elements((2 * n * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| ops::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn softmax(c: &mut Criterion) {
    let x = random(400, 3136, 3);
    c.bench_function("softmax_rows/400x3136", |b| b.iter(|| ops::softmax_rows(black_box(&x)).unwrap()));
}

criterion_group!(benches, matmul, softmax);
criterion_main!(benches);
