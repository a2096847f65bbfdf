//! Forward simulation and adjoint solve on a single worker against the
//! default rayon pool. Build with `--no-default-features` to time the
//! sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfspde::cauchy::{self, CauchySpec, Profile};
use mfspde::triple::TimeGrid;

fn setup() -> mfspde::lq::LqProblem {
    let mut spec = CauchySpec::heat(
        32,
        4.0,
        1.0,
        Profile::Gaussian { base: 0.0, amplitude: 1.0, center: 0.0, width: 0.8 },
    );
    spec.rho = Profile::Constant(0.3);
    spec.eta = Profile::Constant(0.2);
    let grid = TimeGrid::new(1.0, 32).unwrap();
    cauchy::discretize(&spec, &grid)
        .unwrap()
        .lq_problem(grid, 1000, 1)
        .unwrap()
}

fn ensemble(c: &mut Criterion) {
    let prob = setup();
    let ctl = prob.control_problem();
    let u = ctl.zero_control(false);
    let default_threads = rayon::current_num_threads();
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    for threads in [1, default_threads] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        group.bench_with_input(BenchmarkId::new("forward", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| ctl.simulate(&u).unwrap()))
        });
        let ens = ctl.simulate(&u).unwrap();
        group.bench_with_input(BenchmarkId::new("adjoint", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| ctl.adjoint(&ens, &u).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, ensemble);
criterion_main!(benches);
