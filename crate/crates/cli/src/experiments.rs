//! One runner per experiment kind.

use mfspde::backward::{bspde_apriori_check, solve_backward};
use mfspde::cauchy::{self, check_superparabolic};
use mfspde::control::{self, directional_derivative, evaluate, fd_directional_derivative, StepRule};
use mfspde::estimates::{
    backward_dependence_study, forward_apriori_study, forward_dependence_study, BackwardPerturbation, BackwardSettings,
    ForwardPerturbation, ScalingStudy,
};
use mfspde::export;
use mfspde::forward::{ensemble_mean, ensemble_variance, moment_oracle, simulate, ControlProcess};
use mfspde::linalg::column_mean;
use mfspde::lq::{solve_fixed_point, LqProblem};
use mfspde::DVector;

use crate::assemble;
use crate::config::{ExperimentConfig, ExperimentKind, Method, PerturbedTerm, StudyTarget};
use crate::error::CliError;
use crate::report::Report;

pub fn run(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let mut report = Report::default();
    match cfg.kind {
        ExperimentKind::ForwardSim => forward_sim(cfg, &mut report)?,
        ExperimentKind::BackwardSolve => backward_solve(cfg, &mut report)?,
        ExperimentKind::Gradcheck => {
            gradcheck(cfg, &mut report, 3)?;
        }
        ExperimentKind::LqSolve => lq_solve(cfg, &mut report)?,
        ExperimentKind::Cauchy => cauchy_run(cfg, &mut report)?,
        ExperimentKind::DependenceStudy => {
            dependence(cfg, &mut report)?;
        }
    }
    let summary = report.summary.clone();
    report.csv("summary", cfg.output.wants("summary"), |w| export::write_summary(w, &summary))?;
    Ok(report)
}

fn forward_sim(cfg: &ExperimentConfig, report: &mut Report) -> Result<(), CliError> {
    let problem = assemble::forward_problem(cfg)?;
    let grid = assemble::grid(cfg)?;
    let ens = report.timed("simulate", || Ok(simulate(&problem, &grid, cfg.grid.particles, cfg.seed, None)?))?;
    let out = &cfg.output;
    report.csv("ensemble", out.wants("ensemble"), |w| export::write_ensemble_summary(w, &ens))?;
    report.csv("paths", out.wants("paths"), |w| export::write_paths(w, &ens, out.paths))?;
    let means = ensemble_mean(&ens);
    let vars = ensemble_variance(&ens);
    let last = grid.steps();
    for c in 0..problem.dim() {
        report.record(format!("terminal_mean_{c}"), means[last][c]);
        report.record(format!("terminal_variance_{c}"), vars[last][c]);
    }
    if let Ok(oracle) = moment_oracle(&problem, &grid) {
        // deviation of the Monte-Carlo mean in standard errors
        let m = cfg.grid.particles as f64;
        let mut worst: f64 = 0.0;
        for k in 1..=last {
            for c in 0..problem.dim() {
                let se = (vars[k][c] / m).sqrt();
                let gap = (means[k][c] - oracle[k][c]).abs();
                worst = worst.max(if se > 0.0 { gap / se } else if gap > 1e-12 { f64::INFINITY } else { 0.0 });
            }
        }
        report.record("oracle_max_standard_errors", worst);
        report.csv("oracle", out.wants("oracle"), |w| export::write_series(w, &grid, &oracle))?;
    }
    Ok(())
}

fn backward_solve(cfg: &ExperimentConfig, report: &mut Report) -> Result<(), CliError> {
    let forward = assemble::forward_problem(cfg)?;
    let grid = assemble::grid(cfg)?;
    let backward = assemble::backward_problem(cfg, &forward)?;
    let basis = assemble::basis(&cfg.solver)?;
    let ens = report.timed("simulate", || Ok(simulate(&forward, &grid, cfg.grid.particles, cfg.seed, None)?))?;
    let pair = report.timed("backward", || {
        Ok(solve_backward(&backward, &ens, &basis, cfg.solver.picard_tol, cfg.solver.max_picard)?)
    })?;
    let apriori = bspde_apriori_check(&pair, &backward, &ens)?;
    report.csv("adjoint", cfg.output.wants("adjoint"), |w| export::write_adjoint_summary(w, &pair, &grid))?;
    report.csv("picard", cfg.output.wants("picard"), |w| export::write_changes(w, &pair.residual_history))?;
    report.record("picard_iterations", pair.picard_iterations as f64);
    report.record("picard_residual", pair.picard_residual);
    report.record("apriori_lhs", apriori.lhs);
    report.record("apriori_rhs", apriori.rhs);
    report.record("apriori_ratio", apriori.ratio);
    Ok(())
}

/// Adjoint and finite-difference derivatives of `J` along `count` random
/// directions. Returns the relative errors.
pub fn gradcheck(cfg: &ExperimentConfig, report: &mut Report, count: usize) -> Result<Vec<f64>, CliError> {
    let lq = assemble::lq_problem(cfg)?;
    let ctl = lq.control_problem();
    let grid = *lq.grid();
    let u = ctl.zero_control(cfg.solver.deterministic);
    let eval = report.timed("evaluate", || Ok(evaluate(ctl, &u)?))?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    report.timed("finite-differences", || {
        for j in 0..count {
            let dir = ControlProcess::gaussian(ctl.control_dim(), grid.steps(), None, cfg.seed.wrapping_add(1 + j as u64));
            let adjoint = directional_derivative(&eval.gradient, &dir.to_adapted(ctl.particles()), grid.dt())?;
            let fd = fd_directional_derivative(ctl, &u, &dir, &[1e-2, 5e-3, 2.5e-3])?;
            let rel = (adjoint - fd.value).abs() / fd.value.abs().max(1e-12);
            rows.push((format!("direction_{j}_adjoint"), adjoint));
            rows.push((format!("direction_{j}_fd"), fd.value));
            rows.push((format!("direction_{j}_relative_error"), rel));
            errors.push(rel);
        }
        Ok(())
    })?;
    report.csv("gradcheck", cfg.output.wants("gradcheck"), |w| export::write_summary(w, &rows))?;
    report.record("cost", eval.cost);
    report.record("max_relative_error", errors.iter().copied().fold(0.0, f64::max));
    Ok(errors)
}

/// Solved LQ problem shared by `lq-solve` and the verify bundles.
pub struct LqOutcome {
    pub problem: LqProblem,
    pub control: ControlProcess,
    pub ensemble: mfspde::forward::ParticleEnsemble,
    pub adjoint: mfspde::backward::AdjointPair,
    pub cost: f64,
}

pub fn solve_lq(cfg: &ExperimentConfig, report: &mut Report) -> Result<LqOutcome, CliError> {
    let problem = assemble::lq_problem(cfg)?;
    let ctl = problem.control_problem();
    let want = cfg.output.wants("history");
    match cfg.solver.method {
        Method::FixedPoint => {
            let sol = report.timed("fixed-point", || {
                Ok(solve_fixed_point(&problem, assemble::fixed_point_options(&cfg.solver), None)?)
            })?;
            report.csv("history", want, |w| export::write_changes(w, &sol.history))?;
            report.record("iterations", sol.iterations as f64);
            report.record("change", sol.change);
            report.record("damping", sol.damping);
            Ok(LqOutcome {
                control: sol.control,
                ensemble: sol.ensemble,
                adjoint: sol.adjoint,
                cost: sol.cost,
                problem,
            })
        }
        Method::Gradient => {
            let init = ctl.zero_control(cfg.solver.deterministic);
            let opt = report.timed("gradient", || {
                Ok(control::optimize(ctl, &init, StepRule::default(), cfg.solver.max_iter, cfg.solver.tol)?)
            })?;
            if !opt.converged {
                return Err(CliError::NonConvergence(format!(
                    "gradient method stopped after {} iterations with residual {:e}{}",
                    opt.iterations(),
                    opt.final_residual(),
                    if opt.line_search_failed { " (line search failed)" } else { "" }
                )));
            }
            report.csv("history", want, |w| export::write_history(w, &opt.history))?;
            report.record("iterations", opt.iterations() as f64);
            report.record("residual", opt.final_residual());
            let eval = evaluate(ctl, &opt.control)?;
            Ok(LqOutcome {
                control: opt.control,
                ensemble: eval.ensemble,
                adjoint: eval.adjoint,
                cost: eval.cost,
                problem,
            })
        }
    }
}

fn mean_control(u: &ControlProcess, particles: usize) -> Vec<DVector<f64>> {
    (0..u.steps()).map(|k| column_mean(&u.values_at(k, particles))).collect()
}

fn lq_solve(cfg: &ExperimentConfig, report: &mut Report) -> Result<(), CliError> {
    let out = solve_lq(cfg, report)?;
    let grid = *out.problem.grid();
    let particles = out.problem.particles();
    report.record("cost", out.cost);
    report.record("dual_residual", out.problem.dual_residual(&out.control, &out.adjoint));
    let controls = mean_control(&out.control, particles);
    let states = ensemble_mean(&out.ensemble);
    report.csv("control", cfg.output.wants("control"), |w| export::write_series(w, &grid, &controls))?;
    report.csv("state", cfg.output.wants("state"), |w| export::write_series(w, &grid, &states))?;
    Ok(())
}

fn cauchy_run(cfg: &ExperimentConfig, report: &mut Report) -> Result<(), CliError> {
    let spec = assemble::cauchy_spec(cfg)?;
    let grid = assemble::grid(cfg)?;
    let sp = check_superparabolic(&spec, 64);
    report.record("min_2a", sp.min_2a);
    report.record("max_2a", sp.max_2a);
    let adjoint = cauchy::analytic_adjoint_check(&spec, &grid)?;
    report.record("adjoint_discrepancy", adjoint.discrepancy);
    let sol = report.timed("solve", || {
        Ok(cauchy::solve_cauchy(
            &spec,
            &grid,
            cfg.grid.particles,
            cfg.seed,
            assemble::fixed_point_options(&cfg.solver),
        )?)
    })?;
    report.record("cost", sol.solution.cost);
    report.record("uncontrolled_cost", sol.uncontrolled_cost);
    report.record("dual_identity", sol.dual_identity);
    report.record("iterations", sol.solution.iterations as f64);
    report.record("damping", sol.solution.damping);
    let nodes = &sol.discretization.nodes;
    let states = ensemble_mean(&sol.solution.ensemble);
    let controls = sol.mean_control();
    let adj: Vec<DVector<f64>> = (0..=grid.steps()).map(|k| sol.solution.adjoint.p_mean(k)).collect();
    let out = &cfg.output;
    report.csv("state_field", out.wants("state_field"), |w| export::write_field(w, &grid, nodes, &states))?;
    report.csv("control_field", out.wants("control_field"), |w| export::write_field(w, &grid, nodes, &controls))?;
    report.csv("adjoint_field", out.wants("adjoint_field"), |w| export::write_field(w, &grid, nodes, &adj))?;
    report.csv("history", out.wants("history"), |w| export::write_changes(w, &sol.solution.history))?;
    Ok(())
}

pub fn dependence(cfg: &ExperimentConfig, report: &mut Report) -> Result<ScalingStudy, CliError> {
    let s = cfg.study.as_ref().ok_or_else(|| CliError::Validation("this experiment needs a [study] section".into()))?;
    let forward = assemble::forward_problem(cfg)?;
    let grid = assemble::grid(cfg)?;
    let n = forward.dim();
    let direction = match &s.direction {
        Some(v) => v.resolve(n, "study.direction")?,
        None => DVector::from_element(n, 1.0),
    };
    let particles = cfg.grid.particles;
    let study = report.timed("study", || {
        let study = match (s.target, s.perturb) {
            (StudyTarget::ForwardApriori, None) => forward_apriori_study(&forward, &s.deltas, &grid, particles, cfg.seed)?,
            (StudyTarget::Forward, Some(PerturbedTerm::Drift)) => {
                forward_dependence_study(&forward, &ForwardPerturbation::drift(direction), &s.deltas, &grid, particles, cfg.seed)?
            }
            (StudyTarget::Forward, Some(PerturbedTerm::Diffusion)) => forward_dependence_study(
                &forward,
                &ForwardPerturbation::diffusion(direction),
                &s.deltas,
                &grid,
                particles,
                cfg.seed,
            )?,
            (StudyTarget::Backward, Some(term @ (PerturbedTerm::Terminal | PerturbedTerm::Driver))) => {
                let backward = assemble::backward_problem(cfg, &forward)?;
                let ens = simulate(&forward, &grid, particles, cfg.seed, None)?;
                let pert = if term == PerturbedTerm::Terminal {
                    BackwardPerturbation::terminal(direction)
                } else {
                    BackwardPerturbation::driver(direction)
                };
                let settings = BackwardSettings {
                    basis: assemble::basis(&cfg.solver)?,
                    picard_tol: cfg.solver.picard_tol,
                    max_picard: cfg.solver.max_picard,
                };
                backward_dependence_study(&backward, &pert, &s.deltas, &ens, &settings)?
            }
            (target, perturb) => {
                return Err(CliError::Validation(format!(
                    "study target {target:?} cannot perturb {perturb:?}; forward takes drift or diffusion, \
                     backward takes terminal or driver, forward-apriori takes none"
                )))
            }
        };
        Ok(study)
    })?;
    report.csv("study", cfg.output.wants("study"), |w| export::write_study(w, &study))?;
    report.record("slope", study.fit.slope);
    report.record("slope_residual", study.fit.residual);
    report.record("k_hat", study.k_hat);
    Ok(study)
}
