use cgqn_core::cg::{cg_run, default_tol};
use cgqn_core::linalg::solve_linear;
use cgqn_core::problem::random_spd_problem;
use cgqn_core::qn::{Schedule, UpdateScheme};
use cgqn_core::verify::{run_suite, VerifyConfig};
use cgqn_core::{qn_run, SpectrumSpec};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn solvers(c: &mut Criterion) {
    let bfgs = UpdateScheme::broyden(Schedule::constant(0.0)).unwrap();
    for n in [10usize, 50] {
        let qp = random_spd_problem(&SpectrumSpec::log_spaced(n, 1e2, 1).unwrap());
        let tol = default_tol(&qp);
        c.bench_with_input(BenchmarkId::new("cg_run", n), &qp, |b, qp| {
            b.iter(|| cg_run(black_box(qp), tol, 3 * n).unwrap())
        });
        c.bench_with_input(BenchmarkId::new("qn_run_bfgs", n), &qp, |b, qp| {
            b.iter(|| qn_run(black_box(qp), &bfgs, tol, 3 * n))
        });
        c.bench_with_input(BenchmarkId::new("solve_linear", n), &qp, |b, qp| {
            b.iter(|| solve_linear(black_box(qp.h()), qp.c()).unwrap())
        });
    }
}

fn suite(c: &mut Criterion) {
    let mut group = c.benchmark_group("verify");
    group.sample_size(10);
    group.bench_function("suite_10_trials", |b| {
        b.iter(|| {
            run_suite(&VerifyConfig {
                trials: 10,
                seed: 42,
                n: None,
                property: None,
            })
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, solvers, suite);
criterion_main!(benches);
