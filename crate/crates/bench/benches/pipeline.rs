use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dff_core::nmf::nmf_factorize;
use dff_core::refine::{guided_filter, meanfield_refine};
use dff_core::segmentation::binarize_factor;
use dff_core::{FeatureMatrix, HeatMapStack, NmfConfig, RefineConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(h: usize, w: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| rng.gen::<f32>())
}

/// Rows of a 14x14 map over 5 images against 512 channels, the shape of a
/// deep-layer batch.
fn nmf(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, cols) = (5 * 14 * 14, 512);
    let a = FeatureMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let mut group = c.benchmark_group("nmf_factorize");
    group.sample_size(10);
    for k in [3, 8] {
        let cfg = NmfConfig { k, max_iters: 50, rel_tol: 0.0, ..NmfConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(k), &cfg, |b, cfg| {
            b.iter(|| nmf_factorize(black_box(&a), cfg).unwrap())
        });
    }
    group.finish();
}

fn guided(c: &mut Criterion) {
    let guide = random_map(224, 224, 2);
    let src = random_map(224, 224, 3);
    let mut group = c.benchmark_group("guided_filter");
    for radius in [4, 16] {
        group.bench_with_input(BenchmarkId::from_parameter(radius), &radius, |b, &r| {
            b.iter(|| guided_filter(black_box(&guide), black_box(&src), r, 1e-3).unwrap())
        });
    }
    group.finish();
}

fn binarize(c: &mut Criterion) {
    let maps: Vec<Array2<f32>> = (0..10).map(|i| random_map(224, 224, 10 + i)).collect();
    let refs: Vec<&Array2<f32>> = maps.iter().collect();
    c.bench_function("binarize_factor", |b| b.iter(|| binarize_factor(0, black_box(&refs), 75.0).unwrap()));
}

fn meanfield(c: &mut Criterion) {
    let stacks: Vec<HeatMapStack> = (0..2)
        .map(|i| HeatMapStack::new(format!("img{i}"), (0..3).map(|j| random_map(112, 112, 20 + 3 * i + j)).collect()).unwrap())
        .collect();
    let guides: Vec<Array2<f32>> = (0..2).map(|i| random_map(112, 112, 40 + i)).collect();
    let cfg = RefineConfig::default();
    let mut group = c.benchmark_group("meanfield_refine");
    group.sample_size(10);
    group.bench_function("2x3x112", |b| b.iter(|| meanfield_refine(black_box(&stacks), &guides, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, nmf, guided, binarize, meanfield);
criterion_main!(benches);
