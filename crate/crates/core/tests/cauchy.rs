use std::time::Instant;

use mfspde::cauchy::{self, CauchySpec, Profile};
use mfspde::control::{directional_derivative, evaluate, fd_directional_derivative};
use mfspde::forward::ControlProcess;
use mfspde::lq::FixedPointOptions;
use mfspde::triple::TimeGrid;
use mfspde::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stochastic_spec(mesh: usize) -> CauchySpec {
    let mut spec = CauchySpec::heat(
        mesh,
        4.0,
        1.0,
        Profile::Gaussian { base: 0.0, amplitude: 1.0, center: 0.0, width: 0.8 },
    );
    spec.a = Profile::SinBump { base: 1.0, amplitude: 0.3, frequency: 0.7 };
    spec.b = Profile::SinBump { base: 0.2, amplitude: 0.1, frequency: 1.3 };
    spec.c = Profile::Constant(-0.1);
    spec.eta = Profile::Constant(0.2);
    spec.rho = Profile::Constant(0.3);
    spec.sigma = Profile::Constant(0.1);
    spec
}

#[test]
fn gradient_matches_common_noise_differences() {
    let start = Instant::now();
    let spec = stochastic_spec(32);
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let disc = cauchy::discretize(&spec, &grid).unwrap();
    let prob = disc.lq_problem(grid, 2000, 17).unwrap();
    let cp = prob.control_problem();
    let u = cp.zero_control(false);
    let eval = evaluate(cp, &u).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let dir = ControlProcess::Deterministic(
            (0..grid.steps())
                .map(|_| DVector::from_iterator(32, (0..32).map(|_| rng.random_range(-1.0..1.0))))
                .collect(),
        );
        let adjoint = directional_derivative(&eval.gradient, &dir.to_adapted(2000), grid.dt()).unwrap();
        let fd = fd_directional_derivative(cp, &u, &dir, &[1e-2, 5e-3, 2.5e-3]).unwrap();
        let rel = (adjoint - fd.value).abs() / fd.value.abs().max(1e-12);
        assert!(rel <= 1e-3, "adjoint {adjoint} fd {} rel {rel}", fd.value);
    }
    eprintln!("cauchy gradient check took {:?}", start.elapsed());
}

#[test]
fn dual_identity_holds_at_the_optimum() {
    let spec = stochastic_spec(8);
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let options = FixedPointOptions { deterministic: true, auto_damping: true, ..Default::default() };
    let sol = cauchy::solve_cauchy(&spec, &grid, 100, 4, options).unwrap();
    assert!(sol.dual_identity <= 1e-6, "{}", sol.dual_identity);
    assert!(sol.solution.cost < sol.uncontrolled_cost);
}

fn two_mode(z: f64, t: f64, half_width: f64) -> f64 {
    let k1 = std::f64::consts::PI / (2.0 * half_width);
    let k3 = 3.0 * k1;
    let s = z + half_width;
    (-k1 * k1 * t).exp() * (k1 * s).sin() + 0.5 * (-k3 * k3 * t).exp() * (k3 * s).sin()
}

fn heat_error(mesh: usize, steps: usize) -> f64 {
    let (half_width, horizon) = (1.0, 0.5);
    let initial = Profile::custom(move |_, z| two_mode(z, 0.0, half_width), |_, _| 0.0);
    let spec = CauchySpec::heat(mesh, half_width, horizon, initial);
    let grid = TimeGrid::new(horizon, steps).unwrap();
    let states = cauchy::solve_uncontrolled(&spec, &grid).unwrap();
    let h = spec.spacing();
    let sq: f64 = spec
        .nodes()
        .iter()
        .zip(states[steps].iter())
        .map(|(&z, &y)| (y - two_mode(z, horizon, half_width)).powi(2))
        .sum();
    (h * sq).sqrt()
}

fn observed_order(errors: &[f64], ratio: f64) -> f64 {
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).ln() / ratio.ln()).collect();
    orders.iter().sum::<f64>() / orders.len() as f64
}

#[test]
fn heat_equation_converges_at_second_order_in_space() {
    // dt tied to h² so both error terms shrink by four per halving
    let errors: Vec<f64> = [7, 15, 31, 63]
        .iter()
        .map(|&n| {
            let h = 2.0 / (n + 1) as f64;
            heat_error(n, (0.5 / (h * h / 4.0)).round() as usize)
        })
        .collect();
    let order = observed_order(&errors, 2.0);
    assert!((order - 2.0).abs() <= 0.3, "{errors:?} order {order}");
}

#[test]
fn heat_equation_converges_at_first_order_in_time() {
    let errors: Vec<f64> = [10, 20, 40, 80].iter().map(|&n| heat_error(255, n)).collect();
    let order = observed_order(&errors, 2.0);
    assert!((order - 1.0).abs() <= 0.3, "{errors:?} order {order}");
}

#[test]
fn adjoint_discrepancy_refines() {
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let mut constant = CauchySpec::heat(8, 2.0, 1.0, Profile::Constant(0.0));
    constant.b = Profile::Constant(1.0);
    let mut variable = constant.clone();
    variable.b = Profile::SinBump { base: 0.0, amplitude: 0.5, frequency: 1.0 };
    let mut gaps = Vec::new();
    for n in [15, 31, 63, 127] {
        constant.mesh = n;
        variable.mesh = n;
        let c = cauchy::analytic_adjoint_check(&constant, &grid).unwrap();
        assert!(c.discrepancy <= c.spacing, "{c:?}");
        gaps.push(cauchy::analytic_adjoint_check(&variable, &grid).unwrap().discrepancy);
    }
    let order = observed_order(&gaps, 2.0);
    assert!(order >= 1.7, "{gaps:?} order {order}");
}
