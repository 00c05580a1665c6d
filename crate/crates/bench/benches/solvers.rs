use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsblo::diagnostics::brute_force_ll;
use dsblo::lower_level::QuadraticLowerLevel;
use dsblo::verify::experiment_params;
use dsblo::{implicit_gradient, run_dsblo, DsbloParams, RunHooks};
use dsblo_bench::fixture;

fn lower_level(c: &mut Criterion) {
    let mut group = c.benchmark_group("lower_level");
    for (d, k) in [(10, 5), (50, 10)] {
        let (inst, x, q, _) = fixture(d, k);
        let ll = QuadraticLowerLevel::new(&inst).unwrap();
        group.bench_with_input(BenchmarkId::new("active_set", d), &d, |b, _| {
            b.iter(|| ll.solve(black_box(&x), black_box(&q)).unwrap())
        });
    }
    let (inst, x, q, _) = fixture(4, 6);
    group.bench_function("brute_force_d4", |b| b.iter(|| brute_force_ll(&inst, black_box(&x), &q).unwrap()));
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("implicit_gradient");
    for (d, k) in [(10, 5), (50, 10)] {
        let (inst, x, _, sol) = fixture(d, k);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| implicit_gradient(&inst, black_box(&x), &sol).unwrap())
        });
    }
    group.finish();
}

fn outer_loop(c: &mut Criterion) {
    let mut group = c.benchmark_group("dsblo_200_iterations");
    group.sample_size(10);
    for (d, k) in [(10, 5), (50, 10)] {
        let (inst, ..) = fixture(d, k);
        let params = DsbloParams {
            iterations: 200,
            ..experiment_params(d).0
        };
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| run_dsblo(&inst, &params, RunHooks::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, lower_level, gradients, outer_loop);
criterion_main!(benches);
