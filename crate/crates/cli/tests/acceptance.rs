//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mfspde::backward::{solve_backward, BackwardProblem};
use mfspde::cauchy::{self, CauchySpec, Profile};
use mfspde::coeffs::{
    BackwardDriver, FnControlCoeffs, Gradients, Jacobians, LinearDriver, LqCoeffs, MeanFieldMap,
};
use mfspde::control::{
    check_sufficiency, directional_derivative, evaluate, fd_directional_derivative, optimize, ControlProblem,
    StepRule,
};
use mfspde::estimates::{
    backward_dependence_study, forward_dependence_study, linear_forward, BackwardPerturbation, BackwardSettings,
    ForwardPerturbation, ScalingStudy,
};
use mfspde::forward::{
    ensemble_mean, ensemble_variance, moment_oracle, simulate, ControlProcess, ControlSet, ForwardProblem,
    MeanFieldForm,
};
use mfspde::lq::{check_convexity, solve_fixed_point, verify_coercivity, FixedPointOptions, LqProblem, LqSolution};
use mfspde::regression::{FeatureSource, RegressionBasis};
use mfspde::triple::{DiscreteTriple, OperatorProcess, TimeGrid};
use mfspde::{DMatrix, DVector};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (&'static str, fn() -> Outcome);

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn scalar_lq(coeffs: LqCoeffs, a: f64, steps: usize, particles: usize, seed: u64) -> LqProblem {
    let tri = DiscreteTriple::identity(1);
    let op = if a == 0.0 {
        OperatorProcess::zero(&tri)
    } else {
        OperatorProcess::constant(&tri, m1(a), a).unwrap()
    };
    LqProblem::new(tri, op, coeffs, v1(1.0), TimeGrid::new(1.0, steps).unwrap(), particles, seed).unwrap()
}

/// Scalar problem with multiplicative, mean-field and control-dependent noise.
fn stochastic_lq(steps: usize, particles: usize) -> LqProblem {
    let coeffs = LqCoeffs::scalar(0.2, 0.1, 1.0, 0.3, 0.1, 0.5, 1.0, 0.5, 1.0, 1.0, 0.5);
    scalar_lq(coeffs, 0.5, steps, particles, 21)
}

fn riccati(mean_field: bool) -> LqProblem {
    let g2 = if mean_field { 1.0 } else { 0.0 };
    scalar_lq(LqCoeffs::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, g2, 1.0, 0.0, 0.0), 0.0, 200, 2, 5)
}

fn stochastic_cauchy(mesh: usize) -> CauchySpec {
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

fn within_budget(start: Instant, budget: Duration, detail: &mut String) -> bool {
    let took = start.elapsed();
    detail.push_str(&format!(" time={:.1}s/{}s", took.as_secs_f64(), budget.as_secs()));
    took <= budget
}

/// Largest relative gap between the adjoint gradient and central
/// differences over three random deterministic directions.
fn worst_gradient_error(cp: &ControlProblem, base: &ControlProcess, m: usize, seed: u64) -> mfspde::Result<f64> {
    let grid = TimeGrid::new(1.0, base.steps())?;
    let eval = evaluate(cp, base)?;
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let dir = ControlProcess::gaussian(m, grid.steps(), None, seed + j);
        let adjoint = directional_derivative(&eval.gradient, &dir.to_adapted(cp.particles()), grid.dt())?;
        let fd = fd_directional_derivative(cp, base, &dir, &[1e-2, 5e-3, 2.5e-3])?;
        worst = worst.max((adjoint - fd.value).abs() / fd.value.abs().max(1e-12));
    }
    Ok(worst)
}

fn gradient_consistency() -> Outcome {
    let start = Instant::now();
    let scalar = stochastic_lq(64, 2000);
    let cp = scalar.control_problem();
    let base = ControlProcess::gaussian(1, 64, Some(2000), 3);
    let scalar_err = worst_gradient_error(cp, &base, 1, 100)?;

    let grid = TimeGrid::new(1.0, 64)?;
    let disc = cauchy::discretize(&stochastic_cauchy(32), &grid)?;
    let prob = disc.lq_problem(grid, 2000, 17)?;
    let cp = prob.control_problem();
    let cauchy_err = worst_gradient_error(cp, &cp.zero_control(false), 32, 200)?;

    let mut detail = format!("scalar_rel={scalar_err:.2e} cauchy_rel={cauchy_err:.2e} tol=1e-3");
    let fast = within_budget(start, Duration::from_secs(120), &mut detail);
    Ok((scalar_err <= 1e-3 && cauchy_err <= 1e-3 && fast, detail))
}

/// Sup-norm gap between the control and `−tanh(1 − t)·X(t)`, relative to
/// the sup-norm of the reference.
fn feedback_gap(prob: &LqProblem, control: &ControlProcess) -> mfspde::Result<f64> {
    let ens = prob.control_problem().simulate(control)?;
    let grid = prob.grid();
    let (mut gap, mut scale): (f64, f64) = (0.0, 0.0);
    for k in 0..grid.steps() {
        let reference = -(1.0 - grid.node(k)).tanh() * ens.mean(k)[0];
        gap = gap.max((control.value(k, 0)[0] - reference).abs());
        scale = scale.max(reference.abs());
    }
    Ok(gap / scale)
}

fn riccati_oracle() -> Outcome {
    let start = Instant::now();
    let prob = riccati(false);
    let exact = 1f64.tanh();
    let fixed = solve_fixed_point(&prob, FixedPointOptions::default(), None)?;
    let cp = prob.control_problem();
    let descent = optimize(cp, &cp.zero_control(false), StepRule::default(), 2000, 1e-14)?;
    let fixed_rel = (fixed.cost - exact).abs() / exact;
    let descent_rel = (descent.final_cost() - exact).abs() / exact;
    let fixed_gap = feedback_gap(&prob, &fixed.control)?;
    let descent_gap = feedback_gap(&prob, &descent.control)?;
    let mut detail = format!(
        "fixed_point J={:.5} ({fixed_rel:.2e}) sup={fixed_gap:.2e}; gradient J={:.5} ({descent_rel:.2e}) sup={descent_gap:.2e} tol=2e-2",
        fixed.cost,
        descent.final_cost()
    );
    let fast = within_budget(start, Duration::from_secs(30), &mut detail);
    let passed = [fixed_rel, descent_rel, fixed_gap, descent_gap].iter().all(|&e| e <= 0.02);
    Ok((passed && descent.converged && fast, detail))
}

fn mean_field_riccati() -> Outcome {
    let start = Instant::now();
    let prob = riccati(true);
    let exact = 2f64.sqrt() * 2f64.sqrt().tanh();
    let sol = solve_fixed_point(&prob, FixedPointOptions::default(), None)?;
    let rel = (sol.cost - exact).abs() / exact;
    let mut detail = format!("J={:.5} exact={exact:.5} rel={rel:.2e} tol=2e-2", sol.cost);
    let fast = within_budget(start, Duration::from_secs(30), &mut detail);
    Ok((rel <= 0.02 && fast, detail))
}

fn solved_stochastic_lq() -> mfspde::Result<(LqProblem, LqSolution)> {
    let prob = stochastic_lq(32, 500);
    let sol = solve_fixed_point(&prob, FixedPointOptions::default(), None)?;
    Ok((prob, sol))
}

fn dual_identity() -> Outcome {
    let (prob, sol) = solved_stochastic_lq()?;
    let lq = prob.dual_residual(&sol.control, &sol.adjoint);
    let grid = TimeGrid::new(1.0, 32)?;
    let options = FixedPointOptions { deterministic: true, auto_damping: true, ..Default::default() };
    let cauchy = cauchy::solve_cauchy(&stochastic_cauchy(16), &grid, 200, 4, options)?;
    let detail = format!("lq={lq:.2e} cauchy={:.2e} tol=1e-6", cauchy.dual_identity);
    Ok((lq <= 1e-6 && cauchy.dual_identity <= 1e-6, detail))
}

const LADDER: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

fn dependence_forward() -> mfspde::Result<ForwardProblem> {
    let tri = DiscreteTriple::identity(2);
    let op = OperatorProcess::constant(&tri, DMatrix::identity(2, 2) * 0.5, 0.5)?;
    linear_forward(
        tri,
        op,
        (DMatrix::identity(2, 2) * 0.2, DMatrix::identity(2, 2) * 0.1),
        (DMatrix::identity(2, 2) * 0.3, DMatrix::zeros(2, 2)),
        DVector::from_vec(vec![1.0, 0.0]),
    )
}

fn dependence_backward(forward: &ForwardProblem) -> mfspde::Result<BackwardProblem> {
    let driver = BackwardDriver::linear(LinearDriver {
        on_y_mean: DMatrix::identity(2, 2) * 0.1,
        on_z_mean: DMatrix::zeros(2, 2),
        on_y: DMatrix::identity(2, 2) * 0.3,
        on_z: DMatrix::identity(2, 2) * 0.2,
        offset: DVector::zeros(2),
    })?;
    BackwardProblem::new(forward.triple.clone(), forward.operator.clone(), driver, |path| {
        path.terminal_state() + DVector::from_element(2, path.terminal_brownian())
    })
}

fn studies(particles: usize) -> mfspde::Result<(ScalingStudy, ScalingStudy)> {
    let grid = TimeGrid::new(1.0, 32)?;
    let forward = dependence_forward()?;
    let direction = DVector::from_vec(vec![1.0, -1.0]);
    let fwd = forward_dependence_study(&forward, &ForwardPerturbation::drift(direction.clone()), &LADDER, &grid, particles, 9)?;
    let ens = simulate(&forward, &grid, particles, 9, None)?;
    let bwd = backward_dependence_study(
        &dependence_backward(&forward)?,
        &BackwardPerturbation::driver(direction),
        &LADDER,
        &ens,
        &BackwardSettings::default(),
    )?;
    Ok((fwd, bwd))
}

fn dependence_slopes() -> Outcome {
    let start = Instant::now();
    let (fwd_small, bwd_small) = studies(500)?;
    let (fwd, bwd) = studies(2000)?;
    let drift = |a: &ScalingStudy, b: &ScalingStudy| (a.k_hat / b.k_hat - 1.0).abs();
    let (fwd_drift, bwd_drift) = (drift(&fwd_small, &fwd), drift(&bwd_small, &bwd));
    let mut detail = format!(
        "forward slope={:.3} k_hat drift={fwd_drift:.3}; backward slope={:.3} k_hat drift={bwd_drift:.3}",
        fwd.fit.slope, bwd.fit.slope
    );
    let fast = within_budget(start, Duration::from_secs(120), &mut detail);
    let slopes = [&fwd_small, &fwd, &bwd_small, &bwd].iter().all(|s| s.slope_within(2.0, 0.2));
    Ok((slopes && fwd_drift <= 0.2 && bwd_drift <= 0.2 && fast, detail))
}

fn brownian_ensemble(steps: usize, particles: usize, seed: u64) -> mfspde::Result<mfspde::forward::ParticleEnsemble> {
    let tri = DiscreteTriple::identity(1);
    let op = OperatorProcess::zero(&tri);
    let p = ForwardProblem::new(
        tri,
        op,
        MeanFieldMap::zero(1),
        MeanFieldMap::constant(v1(1.0)),
        MeanFieldForm::EnsembleMean,
        v1(0.0),
    )?;
    simulate(&p, &TimeGrid::new(1.0, steps)?, particles, seed, None)
}

fn backward_closed_forms() -> Outcome {
    let tri = DiscreteTriple::identity(1);
    let op = OperatorProcess::zero(&tri);
    let ens = brownian_ensemble(64, 400, 2)?;
    let grid = *ens.grid();
    let basis = RegressionBasis::affine();

    let constant = BackwardProblem::new(tri.clone(), op.clone(), BackwardDriver::zero(1), |_| v1(2.5))?;
    let sol = solve_backward(&constant, &ens, &basis, 1e-12, 10)?;
    let const_err = sol
        .p
        .iter()
        .map(|y| y.add_scalar(-2.5).amax())
        .chain(sol.q.iter().map(|z| z.amax()))
        .fold(0.0, f64::max);

    let linear = BackwardProblem::new(tri.clone(), op.clone(), BackwardDriver::constant(v1(1.0)), |_| v1(0.0))?;
    let sol = solve_backward(&linear, &ens, &basis, 1e-12, 10)?;
    let linear_err = (0..=grid.steps())
        .map(|k| sol.p[k].map(|y| y + (grid.horizon() - grid.node(k))).amax())
        .fold(0.0, f64::max);

    let ens = brownian_ensemble(64, 4000, 3)?;
    let brownian = BackwardProblem::new(tri, op, BackwardDriver::zero(1), |path| v1(path.terminal_brownian()))?;
    let basis = RegressionBasis::affine().with_source(FeatureSource::Brownian);
    let sol = solve_backward(&brownian, &ens, &basis, 1e-12, 10)?;
    let dt = ens.grid().dt();
    let z_err = sol
        .q
        .iter()
        .map(|z| dt * z.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / z.ncols() as f64)
        .sum::<f64>()
        .sqrt();

    let detail = format!("constant={const_err:.1e} linear={linear_err:.1e} tol=1e-10; z_l2={z_err:.3} tol=0.05");
    Ok((const_err <= 1e-10 && linear_err <= 1e-10 && z_err <= 0.05, detail))
}

fn two_mode(z: f64, t: f64, half_width: f64) -> f64 {
    let k1 = std::f64::consts::PI / (2.0 * half_width);
    let k3 = 3.0 * k1;
    let s = z + half_width;
    (-k1 * k1 * t).exp() * (k1 * s).sin() + 0.5 * (-k3 * k3 * t).exp() * (k3 * s).sin()
}

fn heat_error(mesh: usize, steps: usize) -> mfspde::Result<f64> {
    let (half_width, horizon) = (1.0, 0.5);
    let initial = Profile::custom(move |_, z| two_mode(z, 0.0, half_width), |_, _| 0.0);
    let spec = CauchySpec::heat(mesh, half_width, horizon, initial);
    let grid = TimeGrid::new(horizon, steps)?;
    let states = cauchy::solve_uncontrolled(&spec, &grid)?;
    let sq: f64 = spec
        .nodes()
        .iter()
        .zip(states[steps].iter())
        .map(|(&z, &y)| (y - two_mode(z, horizon, half_width)).powi(2))
        .sum();
    Ok((spec.spacing() * sq).sqrt())
}

fn observed_order(errors: &[f64]) -> f64 {
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    orders.iter().sum::<f64>() / orders.len() as f64
}

fn forward_oracles() -> Outcome {
    // deterministic decay
    let (a, steps) = (0.7, 20);
    let tri = DiscreteTriple::identity(1);
    let op = OperatorProcess::constant(&tri, m1(a), a)?;
    let decay = ForwardProblem::new(tri, op, MeanFieldMap::zero(1), MeanFieldMap::zero(1), MeanFieldForm::EnsembleMean, v1(1.0))?;
    let grid = TimeGrid::new(1.0, steps)?;
    let ens = simulate(&decay, &grid, 3, 1, None)?;
    let exact = (1.0 + a * grid.dt()).powi(-(steps as i32));
    let decay_err = ens.terminal().map(|x| x - exact).amax();

    // mean-field moments against the deterministic mean recursion
    let tri = DiscreteTriple::identity(2);
    let op = OperatorProcess::constant(&tri, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.5]), 0.5)?;
    let problem = ForwardProblem::new(
        tri,
        op,
        MeanFieldMap::affine(
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]),
            DVector::from_vec(vec![0.2, 0.0]),
        )?,
        MeanFieldMap::affine(DMatrix::identity(2, 2) * 0.3, DMatrix::identity(2, 2) * 0.1, DVector::from_element(2, 0.05))?,
        MeanFieldForm::EnsembleMean,
        DVector::from_vec(vec![1.0, -0.5]),
    )?;
    let grid = TimeGrid::new(1.0, 50)?;
    let particles = 2000;
    let ens = simulate(&problem, &grid, particles, 11, None)?;
    let oracle = moment_oracle(&problem, &grid)?;
    let (means, vars) = (ensemble_mean(&ens), ensemble_variance(&ens));
    let mut worst_se: f64 = 0.0;
    for k in 1..=grid.steps() {
        for c in 0..2 {
            let se = (vars[k][c] / particles as f64).sqrt();
            worst_se = worst_se.max((means[k][c] - oracle[k][c]).abs() / se);
        }
    }

    // heat equation refinement
    let space: Vec<f64> = [7usize, 15, 31, 63]
        .iter()
        .map(|&n| {
            let h = 2.0 / (n + 1) as f64;
            heat_error(n, (0.5 / (h * h / 4.0)).round() as usize)
        })
        .collect::<mfspde::Result<_>>()?;
    let time: Vec<f64> = [10, 20, 40, 80].iter().map(|&n| heat_error(255, n)).collect::<mfspde::Result<_>>()?;
    let (space_order, time_order) = (observed_order(&space), observed_order(&time));

    let detail = format!(
        "decay={decay_err:.1e} tol=1e-12; moments={worst_se:.2} se tol=3; space order={space_order:.2} time order={time_order:.2} tol=0.3"
    );
    let passed = decay_err <= 1e-12
        && worst_se <= 3.0
        && (space_order - 2.0).abs() <= 0.3
        && (time_order - 1.0).abs() <= 0.3;
    Ok((passed, detail))
}

fn concave_problem() -> mfspde::Result<ControlProblem> {
    let coeffs = FnControlCoeffs::zero(1, 1)
        .with_drift(
            |_, _, _, u| u.clone(),
            |_, _, _, _| Jacobians { x: m1(0.0), x_mean: m1(0.0), u: m1(1.0) },
        )
        .with_running_cost(
            |_, x, _, u| x[0] * x[0] - u[0] * u[0],
            |_, x, _, u| Gradients { x: x * 2.0, x_mean: v1(0.0), u: u * -2.0 },
        );
    let tri = DiscreteTriple::identity(1);
    let op = OperatorProcess::zero(&tri);
    ControlProblem::new(tri, op, Arc::new(coeffs), v1(1.0), ControlSet::Unconstrained, TimeGrid::new(1.0, 8)?, 4, 2)
}

fn sufficiency() -> Outcome {
    let (prob, sol) = solved_stochastic_lq()?;
    let convex = check_sufficiency(prob.control_problem(), &sol.control, &sol.ensemble, &sol.adjoint, 20, 1)?;
    let concave = concave_problem()?;
    let u = concave.zero_control(true);
    let eval = evaluate(&concave, &u)?;
    let rejected = check_sufficiency(&concave, &u, &eval.ensemble, &eval.adjoint, 20, 1)?;
    let detail = format!(
        "lq certified={} gap={:.1e}; concave certified={} gap={:.1e}",
        convex.certified(),
        convex.worst_convexity_gap,
        rejected.certified(),
        rejected.worst_convexity_gap
    );
    Ok((convex.certified() && !rejected.certified(), detail))
}

fn coercivity_convexity() -> Outcome {
    let prob = stochastic_lq(32, 500);
    let coercive = verify_coercivity(&prob, 50, 7)?;
    let convex = check_convexity(&prob, 20, 8)?;
    let worst_gap = convex.gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "min ratio={:.3} floor={:.3} (x0.95); jensen={} min gap={worst_gap:.2e} over {} pairs",
        coercive.min_ratio,
        coercive.floor,
        convex.jensen,
        convex.gaps.len()
    );
    Ok((coercive.passed && coercive.ratios.len() == 50 && convex.jensen && convex.gaps.len() == 20, detail))
}

fn csv_bodies(dir: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path)?);
        }
    }
    Ok(out)
}

fn run_cli(subcommand: &str, config: &Path, out: &Path, workers: usize) -> std::io::Result<i32> {
    let status = Command::new(env!("CARGO_BIN_EXE_mfspde"))
        .arg(subcommand)
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--workers")
        .arg(workers.to_string())
        .output()?
        .status;
    Ok(status.code().unwrap_or(-1))
}

fn determinism() -> Outcome {
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let scratch = tempfile::tempdir()?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(&configs)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut mismatched = Vec::new();
    let mut files = 0;
    for config in &names {
        let stem = config.file_stem().unwrap().to_string_lossy().into_owned();
        let subcommand = if stem.starts_with("verify") { "verify" } else { "run" };
        let mut bodies = Vec::new();
        for (run, workers) in [(0, 1), (1, 1), (2, 4)] {
            let out = scratch.path().join(format!("{stem}-{run}"));
            let code = run_cli(subcommand, config, &out, workers)?;
            if code != 0 {
                mismatched.push(format!("{stem} exit {code}"));
            }
            bodies.push(csv_bodies(&out)?);
        }
        files += bodies[0].len();
        if bodies[0].is_empty() || bodies.iter().any(|b| b != &bodies[0]) {
            mismatched.push(stem);
        }
    }
    let detail = format!("{} configs, {files} csv files, mismatches={mismatched:?}", names.len());
    Ok((mismatched.is_empty(), detail))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient-consistency", gradient_consistency),
        ("riccati-oracle", riccati_oracle),
        ("mean-field-riccati", mean_field_riccati),
        ("dual-identity", dual_identity),
        ("dependence-slopes", dependence_slopes),
        ("backward-closed-forms", backward_closed_forms),
        ("forward-oracles", forward_oracles),
        ("sufficiency", sufficiency),
        ("coercivity-convexity", coercivity_convexity),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (passed, detail) = match check() {
            Ok(outcome) => outcome,
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!("{} {:>2} {name}: {detail}", if passed { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
