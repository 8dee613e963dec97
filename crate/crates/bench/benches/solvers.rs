use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mqshmm::cell::{exact_jacobian, fd_jacobian, meso_step, MacroSource};
use mqshmm::config::RunConfig;
use mqshmm::macroscale::UniformLaw;

fn source() -> MacroSource {
    MacroSource { b_m: [1.2, 0.4], db_m_dt: [2e5, -1e5], da_m_dt: 0.5 }
}

fn cell_solves(c: &mut Criterion) {
    let mut group = c.benchmark_group("cell");
    for n in [10, 20] {
        let mut cfg = RunConfig::default();
        cfg.cell_n = n;
        let model = cfg.cell_model().unwrap();
        let newton = cfg.newton();
        let dt = cfg.dt_macro();
        let zero = model.zero_state();
        group.bench_with_input(BenchmarkId::new("meso_step", n), &n, |b, _| {
            b.iter(|| meso_step(black_box(&zero), &source(), dt, &newton).unwrap())
        });
        let (state, _) = meso_step(&zero, &source(), dt, &newton).unwrap();
        group.bench_with_input(BenchmarkId::new("exact_jacobian", n), &n, |b, _| {
            b.iter(|| exact_jacobian(black_box(&state), source().b_m).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fd_jacobian", n), &n, |b, _| {
            b.iter(|| fd_jacobian(black_box(&zero), None, &source(), dt, 1e-6, &newton).unwrap())
        });
    }
    group.finish();
}

fn macro_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let problem = cfg.macro_problem().unwrap();
    let start = problem.zero_state(0.0);
    let newton = cfg.newton();
    let dt = cfg.dt_macro();
    let law = cfg.grain_law();
    c.bench_function("macro/solve_step_uniform_brauer", |b| {
        b.iter(|| problem.solve_step(black_box(&start), 1, dt, &mut UniformLaw(law), &newton).unwrap())
    });
    let reference = cfg.reference_problem().unwrap();
    let mut group = c.benchmark_group("reference");
    group.sample_size(10);
    group.bench_function("solve_step", |b| {
        b.iter(|| {
            reference
                .solve_step(black_box(&reference.zero_state(0.0)), 1, dt, &mut mqshmm::macroscale::NoGaussPoints, &newton)
                .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, cell_solves, macro_step);
criterion_main!(benches);
