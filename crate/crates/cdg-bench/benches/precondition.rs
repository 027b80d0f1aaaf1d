//! Solver scaling: the linear-time contract shows up as roughly constant
//! wall time across channel counts at a fixed total element count, while
//! the dense convolution oracle grows quadratically.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use cdg_bench::bench_tensor;
use cdg_core::precondition::{
    conv_oracle, kernel_ktilde, laplacian_rasterized, reweighted_h0, sobolev_h1, sobolev_tilde_h1,
};

const TOTAL_ELEMENTS: usize = 1 << 21; // 2 Mi values per input

fn solver_benches(c: &mut Criterion) {
    let mut group = c.benchmark_group("solvers_fixed_total");
    group.sample_size(10);
    group.throughput(Throughput::Elements(TOTAL_ELEMENTS as u64));
    for o in [256usize, 1024, 4096] {
        let fibers = TOTAL_ELEMENTS / o;
        let f = bench_tensor([o, fibers, 1, 1]);
        group.bench_with_input(BenchmarkId::new("sobolev_tilde_h1", o), &f, |b, f| {
            b.iter(|| sobolev_tilde_h1(black_box(f), 1.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sobolev_h1", o), &f, |b, f| {
            b.iter(|| sobolev_h1(black_box(f), 1.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("reweighted_h0", o), &f, |b, f| {
            b.iter(|| reweighted_h0(black_box(f), 2.0).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("laplacian_rasterized");
    group.sample_size(10);
    let f = bench_tensor([512, 64, 2, 2]);
    group.bench_function("n_131072", |b| {
        b.iter(|| laplacian_rasterized(black_box(&f), 1.0).unwrap())
    });
    group.finish();

    // The dense convolution route is quadratic in the channel count; this
    // group is the contrast case, not a target.
    let mut group = c.benchmark_group("conv_oracle");
    group.sample_size(10);
    for o in [64usize, 256] {
        let f = bench_tensor([o, 32, 1, 1]);
        let kernel: Vec<f64> = (0..o)
            .map(|d| kernel_ktilde(d as f64 / o as f64, 1.0).unwrap())
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(o), &(f, kernel), |b, (f, k)| {
            b.iter(|| conv_oracle(black_box(f), black_box(k)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, solver_benches);
criterion_main!(benches);
