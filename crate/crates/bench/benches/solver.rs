use std::hint::black_box;

use bibq_core::bitplane::init_quantize;
use bibq_core::bottleneck::{LayerFit, QuantizerSettings};
use bibq_core::solver::{build_design, lasso_path, oracle_l0, solve_lasso};
use bibq_core::synthetic::{SyntheticConfig, SyntheticLayer};
use bibq_core::{ActivationTensor, BitplaneCodebook, BottleneckOptions, LambdaGrid, Shape, SolverOptions};
use criterion::{criterion_group, criterion_main, Criterion};

fn layer(samples: usize) -> Vec<ActivationTensor> {
    SyntheticConfig {
        num_samples: samples,
        layers: vec![SyntheticLayer::rectified(Shape::new(8, 8, 32).unwrap(), 0.6)],
        seed: 3,
    }
    .generate()
    .remove(0)
}

fn benches(c: &mut Criterion) {
    let xs = layer(64);
    let spec = QuantizerSettings::default().calibrate(&xs).unwrap();
    let codebooks: Vec<BitplaneCodebook> = xs.iter().map(|x| init_quantize(x, &spec)).collect();
    let sys = build_design(&codebooks, &xs).unwrap();
    let opts = SolverOptions::default();
    let lambdas = LambdaGrid::default().values(sys.lambda_max());

    c.bench_function("init_quantize 64x2048", |b| {
        b.iter(|| xs.iter().map(|x| init_quantize(black_box(x), &spec)).collect::<Vec<_>>())
    });
    c.bench_function("build_design 64x2048 D=8", |b| {
        b.iter(|| build_design(black_box(&codebooks), &xs).unwrap())
    });
    c.bench_function("solve_lasso D=8", |b| {
        b.iter(|| solve_lasso(&sys, black_box(sys.lambda_max() * 0.01), &opts).unwrap())
    });
    c.bench_function("lasso_path 32 points D=8", |b| {
        b.iter(|| lasso_path(&sys, black_box(&lambdas), &opts).unwrap())
    });
    c.bench_function("oracle_l0 D=8", |b| b.iter(|| oracle_l0(black_box(&sys), 4).unwrap()));

    let fit = LayerFit::new(1, layer(16), &spec).unwrap();
    let sweep_opts = BottleneckOptions::with_threshold(24.0);
    c.bench_function("sweep 16x2048 D=8", |b| b.iter(|| fit.sweep(black_box(&sweep_opts)).unwrap()));
}

criterion_group!(solver, benches);
criterion_main!(solver);
