use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mivolo_bench::{cost_matrix, image, matrix, rng};
use mivolo_core::pairing::hungarian;
use mivolo_core::tensor::gemm;
use mivolo_core::{CropPair, MiVolo, ModelConfig};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let mut wide = ModelConfig::tiny();
    wide.model.image_size = 256;
    wide.model.patch_size = 32;
    wide.model.embed_dim = 32;
    wide.model.outlooker_depth = 1;
    wide.model.transformer_depth = 1;
    let mut group = c.benchmark_group("forward_single_view");
    for (name, cfg) in [("tiny", ModelConfig::tiny()), ("wide_input", wide)] {
        let model = MiVolo::new(&cfg).unwrap();
        let pair = CropPair::face_only(image(&mut rng(1), cfg.model.image_size)).unwrap();
        group.bench_function(BenchmarkId::new("full", name), |b| {
            b.iter(|| model.forward_pair(black_box(&pair)).unwrap())
        });
        group.bench_function(BenchmarkId::new("skip", name), |b| {
            b.iter(|| model.forward_pair_skip(black_box(&pair)).unwrap())
        });
    }
    group.finish();
}

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [8, 32, 128] {
        let cost = cost_matrix(&mut rng(n as u64), n, n + n / 4);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| hungarian::solve(black_box(cost)).unwrap())
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [32, 128, 384] {
        let mut r = rng(7);
        let (a, b) = (matrix(&mut r, n, n), matrix(&mut r, n, n));
        let mut out = vec![0.0; n * n];
        group.bench_function(BenchmarkId::new("nn", n), |bench| {
            bench.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), false, &mut out, 0.0))
        });
        group.bench_function(BenchmarkId::new("nt", n), |bench| {
            bench.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), true, &mut out, 0.0))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, assignment, matmul);
criterion_main!(benches);
