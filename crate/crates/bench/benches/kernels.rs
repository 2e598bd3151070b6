use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hjm_hypo_bench::{additive_model, gate_model, initial_curve, periodic};
use hjm_hypo_core::brackets::{generate_basis, BasisOptions};
use hjm_hypo_core::malliavin::malliavin_matrix;
use hjm_hypo_core::sim::{brownian_increments, simulate_path, step, tangent_step};
use hjm_hypo_core::{Curve, LinearFunctional, Scheme, SimConfig};
use std::hint::black_box;

fn step_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("step");
    for n in [128, 512] {
        let g = periodic(n);
        let m = gate_model(g);
        let r = initial_curve(g);
        let dw = brownian_increments(1, 0, 1, m.d(), g.dx).remove(0);
        for scheme in [
            Scheme::ItoSplit,
            Scheme::StratonovichHeun,
            Scheme::MildTrapezoid,
        ] {
            let cfg = SimConfig::new(&g, g.dx, scheme);
            group.bench_with_input(BenchmarkId::new(format!("{scheme:?}"), n), &n, |b, _| {
                b.iter(|| step(&m, black_box(&r), &dw, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn tangent_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("tangent");
    for n in [128, 512] {
        let g = periodic(n);
        let m = gate_model(g);
        let r = initial_curve(g);
        let v = Curve::from_fn(g, |x| (0.5 * x).sin());
        let dw = brownian_increments(2, 0, 1, m.d(), g.dx).remove(0);
        let cfg = SimConfig::new(&g, g.dx, Scheme::StratonovichHeun);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| tangent_step(&m, black_box(&r), &v, &dw, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bracket_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("brackets");
    group.sample_size(10);
    let g = periodic(128);
    let r = initial_curve(g);
    for depth in [4, 6] {
        let m = gate_model(g);
        let opts = BasisOptions {
            max_depth: depth,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::new("gate", depth), &depth, |b, _| {
            b.iter(|| generate_basis(&m, black_box(&r), &opts).unwrap())
        });
    }
    group.finish();
}

fn malliavin_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("malliavin");
    group.sample_size(20);
    let g = periodic(128);
    let r = initial_curve(g);
    let fs = [LinearFunctional::Yield(1.0), LinearFunctional::Yield(5.0)];
    for (name, m) in [("additive", additive_model(g)), ("gate", gate_model(g))] {
        let bundle =
            simulate_path(&m, &r, &SimConfig::new(&g, 1.0, Scheme::ItoSplit), 3, 0).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| malliavin_matrix(&m, black_box(&bundle), &fs, bundle.steps()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    kernels,
    step_kernels,
    tangent_kernels,
    bracket_kernels,
    malliavin_kernels
);
criterion_main!(kernels);
