//! Data-parallel vs sequential kernel throughput. The `parallel` feature
//! (default) routes hot kernels through rayon; the `*_seq` entry points are
//! the forced-sequential baseline, so building with default features lets
//! one run compare both paths.
//!
//!     cargo bench -p groupkan
//!     cargo bench -p groupkan --no-default-features   # sequential-only build

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use groupkan::model::{build, GroupKanConfig, Mode};
use groupkan::spline::{batch_basis, batch_basis_seq, SplineGrid};
use groupkan::tensor::kernels::{conv2d_forward, conv2d_forward_seq, matmul, matmul_seq, ConvDims};
use groupkan::tensor::{Tape, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [64usize, 192] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng).data_vec();
        let b = Tensor::randn(&[n, n], 1.0, &mut rng).data_vec();
        group.bench_with_input(BenchmarkId::new("auto", n), &n, |bench, &n| {
            bench.iter(|| matmul(&a, &b, n, n, n))
        });
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, &n| {
            bench.iter(|| matmul_seq(&a, &b, n, n, n))
        });
    }
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = ConvDims {
        batch: 4,
        c_in: 16,
        h: 32,
        w: 32,
        c_out: 32,
        kh: 3,
        kw: 3,
        stride: 1,
        padding: 1,
        groups: 1,
    };
    let x = Tensor::randn(&[d.batch, d.c_in, d.h, d.w], 1.0, &mut rng).data_vec();
    let w = Tensor::randn(&[d.c_out, d.c_in, 3, 3], 0.3, &mut rng).data_vec();
    group.bench_function("auto", |b| b.iter(|| conv2d_forward(&x, &w, &d)));
    group.bench_function("seq", |b| b.iter(|| conv2d_forward_seq(&x, &w, &d)));
    group.finish();
}

fn bench_spline_basis(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_basis");
    let grid = SplineGrid::default_kan();
    let xs: Vec<f64> = (0..16_384).map(|i| (i as f64 * 0.001).sin()).collect();
    group.bench_function("auto", |b| b.iter(|| batch_basis(&xs, &grid)));
    group.bench_function("seq", |b| b.iter(|| batch_basis_seq(&xs, &grid)));
    group.finish();
}

fn bench_model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(10);
    let cfg = GroupKanConfig::tiny();
    let net = build(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 1, 64, 64], 1.0, &mut rng);
    group.bench_function("tiny_eval_2x64x64", |b| {
        b.iter(|| {
            let tape = Tape::inference();
            net.forward(&tape, &x, Mode::Eval).unwrap()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv2d,
    bench_spline_basis,
    bench_model_forward
);
criterion_main!(benches);
