//! Cost, Hamiltonian and gradient machinery for the controlled mean-field
//! system, plus projected-gradient optimization and optimality checks.
//!
//! All evaluations share the problem's frozen Brownian increments, so the
//! sampled cost is a deterministic function of the control array.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backward::{ensemble_l2, solve_linear_adjoint, AdjointPair};
use crate::coeffs::{ControlCoefficients, Gradients, Node};
use crate::forward::{simulate_with_noise, ControlProcess, ControlSet, ForwardProblem, Noise, ParticleEnsemble};
use crate::linalg::{column_mean, pairwise_mean, pairwise_sum, vector_mean};
use crate::regression::RegressionBasis;
use crate::triple::{DiscreteTriple, OperatorProcess, TimeGrid};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ControlProblem {
    pub forward: ForwardProblem,
    pub coeffs: Arc<dyn ControlCoefficients>,
    pub set: ControlSet,
    pub grid: TimeGrid,
    pub basis: RegressionBasis,
    noise: Noise,
}

impl std::fmt::Debug for dyn ControlCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ControlCoefficients(n={}, m={})", self.state_dim(), self.control_dim())
    }
}

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        triple: DiscreteTriple,
        operator: OperatorProcess,
        coeffs: Arc<dyn ControlCoefficients>,
        initial: DVector<f64>,
        set: ControlSet,
        grid: TimeGrid,
        particles: usize,
        seed: u64,
    ) -> Result<Self> {
        let forward = ForwardProblem::controlled(triple, operator, coeffs.clone(), initial)?;
        forward.operator.check_grid(&grid)?;
        if let ControlSet::Box { lower, upper } = &set {
            crate::error::check_dim("control box", coeffs.control_dim(), lower.len())?;
            crate::error::check_dim("control box", coeffs.control_dim(), upper.len())?;
        }
        let noise = Noise::generate(&grid, particles, seed)?;
        Ok(Self {
            forward,
            coeffs,
            set,
            grid,
            basis: RegressionBasis::affine(),
            noise,
        })
    }

    pub fn with_basis(mut self, basis: RegressionBasis) -> Self {
        self.basis = basis;
        self
    }

    pub fn triple(&self) -> &DiscreteTriple {
        &self.forward.triple
    }

    pub fn operator(&self) -> &OperatorProcess {
        &self.forward.operator
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    pub fn particles(&self) -> usize {
        self.noise.particles()
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed()
    }

    pub fn control_dim(&self) -> usize {
        self.coeffs.control_dim()
    }

    pub fn zero_control(&self, deterministic: bool) -> ControlProcess {
        if deterministic {
            ControlProcess::zeros_deterministic(self.control_dim(), self.grid.steps())
        } else {
            ControlProcess::zeros_adapted(self.control_dim(), self.grid.steps(), self.particles())
        }
    }

    /// Forward ensemble under `control` on the shared noise.
    pub fn simulate(&self, control: &ControlProcess) -> Result<ParticleEnsemble> {
        simulate_with_noise(&self.forward, &self.grid, self.noise.clone(), Some(control))
    }

    pub fn adjoint(&self, ens: &ParticleEnsemble, control: &ControlProcess) -> Result<AdjointPair> {
        solve_linear_adjoint(
            self.coeffs.as_ref(),
            self.triple(),
            self.operator(),
            ens,
            control,
            &self.basis,
        )
    }

    /// `J(u)` on the shared noise.
    pub fn cost_of(&self, control: &ControlProcess) -> Result<f64> {
        let ens = self.simulate(control)?;
        cost(self, control, &ens)
    }
}

/// `E[Σ_k dt·l(t_k, X_k, 𝔼X_k, u_k) + Φ(X_N, 𝔼X_N)]` over the ensemble.
pub fn cost(prob: &ControlProblem, control: &ControlProcess, ens: &ParticleEnsemble) -> Result<f64> {
    let grid = ens.grid();
    let dt = grid.dt();
    let steps = grid.steps();
    let particles = ens.particles();
    let means: Vec<DVector<f64>> = (0..=steps).map(|k| ens.mean(k)).collect();
    let per_path: Vec<Result<f64>> = crate::exec::map_indexed(particles, |i| {
        let mut running = Vec::with_capacity(steps);
        for (k, mean) in means.iter().enumerate().take(steps) {
            let l = prob.coeffs.running_cost(
                Node::on(grid, k),
                &ens.particle_state(k, i),
                mean,
                &control.value(k, i),
            );
            if !l.is_finite() {
                return Err(Error::NonFiniteCost(format!("running cost at step {k} on path {i}")));
            }
            running.push(dt * l);
        }
        let phi = prob.coeffs.terminal_cost(&ens.particle_state(steps, i), &means[steps]);
        if !phi.is_finite() {
            return Err(Error::NonFiniteCost(format!("terminal cost on path {i}")));
        }
        Ok(pairwise_sum(&running) + phi)
    });
    let values: Vec<f64> = per_path.into_iter().collect::<Result<_>>()?;
    Ok(pairwise_mean(&values))
}

/// `𝓗 = (h, p)_H + (g, q)_H + l`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    coeffs: &dyn ControlCoefficients,
    triple: &DiscreteTriple,
    node: Node,
    x: &DVector<f64>,
    x_mean: &DVector<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> f64 {
    let h = coeffs.drift(node, x, x_mean, u);
    let g = coeffs.diffusion(node, x, x_mean, u);
    triple.h_inner_unchecked(&h, p) + triple.h_inner_unchecked(&g, q) + coeffs.running_cost(node, x, x_mean, u)
}

/// Coordinate gradients `(𝓗_x, 𝓗_{x'}, 𝓗_u)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_gradients(
    coeffs: &dyn ControlCoefficients,
    triple: &DiscreteTriple,
    node: Node,
    x: &DVector<f64>,
    x_mean: &DVector<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> Gradients {
    let wp = triple.gram_h() * p;
    let wq = triple.gram_h() * q;
    let hj = coeffs.drift_jacobians(node, x, x_mean, u);
    let gj = coeffs.diffusion_jacobians(node, x, x_mean, u);
    let lg = coeffs.running_cost_gradients(node, x, x_mean, u);
    Gradients {
        x: hj.x.tr_mul(&wp) + gj.x.tr_mul(&wq) + lg.x,
        x_mean: hj.x_mean.tr_mul(&wp) + gj.x_mean.tr_mul(&wq) + lg.x_mean,
        u: hj.u.tr_mul(&wp) + gj.u.tr_mul(&wq) + lg.u,
    }
}

/// `𝓗_u` along the ensemble: per path for adapted controls, the ensemble
/// average per step for deterministic ones.
pub fn variational_gradient(
    prob: &ControlProblem,
    control: &ControlProcess,
    ens: &ParticleEnsemble,
    adj: &AdjointPair,
) -> Result<ControlProcess> {
    let grid = ens.grid();
    let steps = grid.steps();
    let particles = ens.particles();
    control.check(grid, particles, prob.control_dim())?;
    crate::error::check_dim("adjoint steps", steps, adj.steps())?;
    crate::error::check_dim("adjoint paths", particles, adj.particles())?;
    let per_step: Vec<Vec<DVector<f64>>> = (0..steps)
        .map(|k| {
            let x = ens.state(k);
            let mean = column_mean(x);
            let node = Node::on(grid, k);
            crate::exec::map_indexed(particles, |i| {
                hamiltonian_gradients(
                    prob.coeffs.as_ref(),
                    prob.triple(),
                    node,
                    &x.column(i).into_owned(),
                    &mean,
                    &control.value(k, i),
                    &adj.p_at(k, i),
                    &adj.q_at(k, i),
                )
                .u
            })
        })
        .collect();
    Ok(if control.is_deterministic() {
        ControlProcess::Deterministic(per_step.iter().map(|g| vector_mean(g)).collect())
    } else {
        ControlProcess::Adapted(per_step.iter().map(|g| nalgebra::DMatrix::from_columns(g)).collect())
    })
}

/// `E∫(𝓗_u, v) dt` for a gradient from [`variational_gradient`].
pub fn directional_derivative(gradient: &ControlProcess, direction: &ControlProcess, dt: f64) -> Result<f64> {
    gradient.pairing(direction, dt)
}

/// Gradient, adjoint and cost at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ensemble: ParticleEnsemble,
    pub adjoint: AdjointPair,
    pub gradient: ControlProcess,
    pub cost: f64,
}

pub fn evaluate(prob: &ControlProblem, control: &ControlProcess) -> Result<Evaluation> {
    let ensemble = prob.simulate(control)?;
    let cost = cost(prob, control, &ensemble)?;
    let adjoint = prob.adjoint(&ensemble, control)?;
    let gradient = variational_gradient(prob, control, &ensemble, &adjoint)?;
    Ok(Evaluation {
        ensemble,
        adjoint,
        gradient,
        cost,
    })
}

/// Central-difference ladder with Richardson extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEstimate {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
    /// `(ε, D(ε))` for every rung.
    pub ladder: Vec<(f64, f64)>,
}

/// Extrapolates central differences `D(ε)` given on a strictly decreasing
/// ladder. The error is the change between the last two extrapolants.
pub fn richardson(ladder: &[(f64, f64)]) -> FdEstimate {
    let mut extrapolated = Vec::new();
    for w in ladder.windows(2) {
        let (e0, d0) = w[0];
        let (e1, d1) = w[1];
        let r2 = (e0 / e1).powi(2);
        extrapolated.push((r2 * d1 - d0) / (r2 - 1.0));
    }
    let (value, error) = match extrapolated.len() {
        0 => (ladder.last().map_or(f64::NAN, |r| r.1), f64::INFINITY),
        1 => (extrapolated[0], (ladder[1].1 - ladder[0].1).abs()),
        l => (extrapolated[l - 1], (extrapolated[l - 1] - extrapolated[l - 2]).abs()),
    };
    let converged = value.is_finite() && error <= 1e-3 * value.abs().max(1e-9);
    FdEstimate {
        value,
        error,
        converged,
        ladder: ladder.to_vec(),
    }
}

/// Central differences of `J` along `direction` with common random numbers.
pub fn fd_directional_derivative(
    prob: &ControlProblem,
    control: &ControlProcess,
    direction: &ControlProcess,
    epsilons: &[f64],
) -> Result<FdEstimate> {
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("epsilons must be positive and strictly decreasing".into()));
    }
    let (u, v) = if control.is_deterministic() == direction.is_deterministic() {
        (control.clone(), direction.clone())
    } else {
        (control.to_adapted(prob.particles()), direction.to_adapted(prob.particles()))
    };
    let mut ladder = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let plus = prob.cost_of(&u.combine(1.0, &v, eps)?)?;
        let minus = prob.cost_of(&u.combine(1.0, &v, -eps)?)?;
        ladder.push((eps, (plus - minus) / (2.0 * eps)));
    }
    Ok(richardson(&ladder))
}

/// Step rule: backtracking Armijo on the shared-noise cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub initial: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub min_step: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            min_step: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_norm: f64,
    /// Step that produced this iterate (0 for the initial control).
    pub step: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub history: Vec<IterationRecord>,
    pub control: ControlProcess,
    pub converged: bool,
    pub line_search_failed: bool,
}

impl OptimizationReport {
    pub fn final_cost(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.cost)
    }

    pub fn final_residual(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.residual)
    }

    /// Number of gradient steps taken.
    pub fn iterations(&self) -> usize {
        self.history.len().saturating_sub(1)
    }
}

/// `E∫‖u − Π(u − 𝓗_u)‖² dt`.
pub fn minimum_condition_residual(
    control: &ControlProcess,
    gradient: &ControlProcess,
    set: &ControlSet,
    dt: f64,
) -> Result<f64> {
    let moved = control.combine(1.0, gradient, -1.0)?.project(set);
    let diff = control.combine(1.0, &moved, -1.0)?;
    Ok(diff.norm_sq(dt))
}

/// Projected-gradient descent `u ← Π(u − γ·𝓗_u)` stopped by the
/// minimum-condition residual.
pub fn optimize(
    prob: &ControlProblem,
    init: &ControlProcess,
    rule: StepRule,
    max_iter: usize,
    tol: f64,
) -> Result<OptimizationReport> {
    let dt = prob.grid.dt();
    let mut u = init.project(&prob.set);
    let mut eval = evaluate(prob, &u)?;
    let mut history = Vec::new();
    let mut step = 0.0;
    let mut line_search_failed = false;
    let mut converged = false;
    for iteration in 0..=max_iter {
        let residual = minimum_condition_residual(&u, &eval.gradient, &prob.set, dt)?;
        history.push(IterationRecord {
            iteration,
            cost: eval.cost,
            gradient_norm: eval.gradient.norm_sq(dt).sqrt(),
            step,
            residual,
        });
        if residual <= tol {
            converged = true;
            break;
        }
        if iteration == max_iter {
            break;
        }
        let mut gamma = rule.initial;
        let accepted = loop {
            let candidate = u.combine(1.0, &eval.gradient, -gamma)?.project(&prob.set);
            let decrease = eval.gradient.pairing(&candidate.combine(1.0, &u, -1.0)?, dt)?;
            let trial = prob.cost_of(&candidate)?;
            if trial <= eval.cost + rule.sufficient_decrease * decrease {
                break Some(candidate);
            }
            gamma *= rule.shrink;
            if gamma < rule.min_step {
                break None;
            }
        };
        match accepted {
            Some(candidate) => {
                u = candidate;
                eval = evaluate(prob, &u)?;
                step = gamma;
            }
            None => {
                line_search_failed = true;
                break;
            }
        }
    }
    Ok(OptimizationReport {
        history,
        control: u,
        converged,
        line_search_failed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyReport {
    pub hamiltonian_convex: bool,
    pub terminal_convex: bool,
    pub pointwise_minimum: bool,
    /// Largest `f(mid) − (f(a) + f(b))/2` seen (positive means a violation).
    pub worst_convexity_gap: f64,
    /// Largest `𝓗(ū) − 𝓗(v)` seen.
    pub worst_minimum_gap: f64,
    pub probes: usize,
}

impl SufficiencyReport {
    pub fn certified(&self) -> bool {
        self.hamiltonian_convex && self.terminal_convex && self.pointwise_minimum
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Sampled conditions of the sufficient maximum principle: midpoint
/// convexity of `(x, x', u) ↦ 𝓗(·, p, q)` and of `Φ`, and pointwise
/// minimality of `𝓗` at the control against 50 sampled admissible values.
/// For deterministic controls the minimality is tested on the ensemble
/// average of `𝓗`.
pub fn check_sufficiency(
    prob: &ControlProblem,
    control: &ControlProcess,
    ens: &ParticleEnsemble,
    adj: &AdjointPair,
    probes: usize,
    seed: u64,
) -> Result<SufficiencyReport> {
    let grid = ens.grid();
    let n = prob.triple().dim();
    let m = prob.control_dim();
    let particles = ens.particles();
    let coeffs = prob.coeffs.as_ref();
    let tri = prob.triple();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_convexity: f64 = f64::NEG_INFINITY;
    let mut worst_terminal: f64 = f64::NEG_INFINITY;
    let mut worst_min: f64 = f64::NEG_INFINITY;
    let slack = |scale: f64| 1e-9 * (1.0 + scale.abs());
    let (mut h_ok, mut phi_ok, mut min_ok) = (true, true, true);
    for _ in 0..probes {
        let k = rng.random_range(0..grid.steps());
        let i = rng.random_range(0..particles);
        let node = Node::on(grid, k);
        let x = ens.particle_state(k, i);
        let mean = ens.mean(k);
        let u = control.value(k, i);
        let (p, q) = (adj.p_at(k, i), adj.q_at(k, i));
        let point = |rng: &mut ChaCha8Rng| (&x + normal(rng, n), &mean + normal(rng, n), &u + normal(rng, m));
        let a = point(&mut rng);
        let b = point(&mut rng);
        let mid = ((&a.0 + &b.0) * 0.5, (&a.1 + &b.1) * 0.5, (&a.2 + &b.2) * 0.5);
        let ham = |z: &(DVector<f64>, DVector<f64>, DVector<f64>)| hamiltonian(coeffs, tri, node, &z.0, &z.1, &z.2, &p, &q);
        let (ha, hb, hm) = (ham(&a), ham(&b), ham(&mid));
        let gap = hm - 0.5 * (ha + hb);
        worst_convexity = worst_convexity.max(gap);
        h_ok &= gap <= slack(ha.abs() + hb.abs());

        let (fa, fb) = (coeffs.terminal_cost(&a.0, &a.1), coeffs.terminal_cost(&b.0, &b.1));
        let gap = coeffs.terminal_cost(&mid.0, &mid.1) - 0.5 * (fa + fb);
        worst_terminal = worst_terminal.max(gap);
        phi_ok &= gap <= slack(fa.abs() + fb.abs());

        let at = |v: &DVector<f64>| -> f64 {
            if control.is_deterministic() {
                let x_all = ens.state(k);
                let vals: Vec<f64> = (0..particles)
                    .map(|j| {
                        hamiltonian(coeffs, tri, node, &x_all.column(j).into_owned(), &mean, v, &adj.p_at(k, j), &adj.q_at(k, j))
                    })
                    .collect();
                pairwise_mean(&vals)
            } else {
                hamiltonian(coeffs, tri, node, &x, &mean, v, &p, &q)
            }
        };
        let h_opt = at(&u);
        for _ in 0..50 {
            let v = match &prob.set {
                ControlSet::Unconstrained => &u + normal(&mut rng, m),
                set => set.sample(m, &mut rng),
            };
            let gap = h_opt - at(&v);
            worst_min = worst_min.max(gap);
            min_ok &= gap <= slack(h_opt);
        }
    }
    Ok(SufficiencyReport {
        hamiltonian_convex: h_ok,
        terminal_convex: phi_ok,
        pointwise_minimum: min_ok,
        worst_convexity_gap: worst_convexity.max(worst_terminal),
        worst_minimum_gap: worst_min,
        probes,
    })
}

/// Defects of a candidate solution of the stochastic Hamiltonian system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemResidual {
    /// Relative ensemble-`L²` gap between the stored and re-simulated state.
    pub forward: f64,
    /// Relative gap between the stored and re-solved adjoint.
    pub backward: f64,
    /// `E∫‖u − Π(u − 𝓗_u)‖² dt` at the stored tuple.
    pub minimum_condition: f64,
}

impl SystemResidual {
    pub fn max(&self) -> f64 {
        self.forward.max(self.backward).max(self.minimum_condition)
    }
}

fn relative(defect: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        defect / scale
    } else {
        defect
    }
}

pub fn hamiltonian_system_residual(
    prob: &ControlProblem,
    control: &ControlProcess,
    ens: &ParticleEnsemble,
    adj: &AdjointPair,
) -> Result<SystemResidual> {
    let tri = prob.triple();
    let resim = simulate_with_noise(&prob.forward, ens.grid(), ens.noise().clone(), Some(control))?;
    let mut defect: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 0..ens.states().len() {
        defect = defect.max(ensemble_l2(&(resim.state(k) - ens.state(k)), tri));
        scale = scale.max(ensemble_l2(ens.state(k), tri));
    }
    let forward = relative(defect, scale);
    let readj = solve_linear_adjoint(prob.coeffs.as_ref(), tri, prob.operator(), ens, control, &prob.basis)?;
    let zero = AdjointPair::zeros(adj.dim(), adj.steps(), adj.particles());
    let backward = relative(readj.distance(adj, tri), adj.distance(&zero, tri));
    let gradient = variational_gradient(prob, control, ens, adj)?;
    let minimum_condition = minimum_condition_residual(control, &gradient, &prob.set, ens.grid().dt())?;
    Ok(SystemResidual {
        forward,
        backward,
        minimum_condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{lq_to_control_coeffs, FnControlCoeffs, Jacobians, LqCoeffs};
    use nalgebra::DMatrix;

    fn lq_problem(lq: LqCoeffs, steps: usize, particles: usize) -> ControlProblem {
        let tri = DiscreteTriple::identity(lq.state_dim());
        let op = OperatorProcess::zero(&tri);
        let coeffs = Arc::new(lq_to_control_coeffs(&lq).unwrap());
        let x0 = DVector::from_element(lq.state_dim(), 1.0);
        ControlProblem::new(tri, op, coeffs, x0, ControlSet::Unconstrained, TimeGrid::new(1.0, steps).unwrap(), particles, 7)
            .unwrap()
    }

    #[test]
    fn cost_of_unit_running_cost_is_the_horizon() {
        let coeffs = FnControlCoeffs::zero(1, 1).with_running_cost(
            |_, _, _, _| 1.0,
            |_, _, _, _| Gradients {
                x: DVector::zeros(1),
                x_mean: DVector::zeros(1),
                u: DVector::zeros(1),
            },
        );
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::zero(&tri);
        let prob = ControlProblem::new(
            tri,
            op,
            Arc::new(coeffs),
            DVector::zeros(1),
            ControlSet::Unconstrained,
            TimeGrid::new(2.0, 8).unwrap(),
            3,
            1,
        )
        .unwrap();
        assert_eq!(prob.cost_of(&prob.zero_control(true)).unwrap(), 2.0);
    }

    #[test]
    fn hamiltonian_hand_evaluation() {
        let lq = LqCoeffs::scalar(1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let c = lq_to_control_coeffs(&lq).unwrap();
        let tri = DiscreteTriple::identity(1);
        let v = |x: f64| DVector::from_element(1, x);
        let node = Node { k: 0, t: 0.0 };
        assert_eq!(hamiltonian(&c, &tri, node, &v(1.0), &v(0.0), &v(2.0), &v(3.0), &v(0.0)), 14.0);
        let g = hamiltonian_gradients(&c, &tri, node, &v(1.0), &v(0.0), &v(2.0), &v(3.0), &v(0.5));
        assert_eq!(g.u[0], 3.0 + 4.0);
    }

    #[test]
    fn hamiltonian_gradients_match_finite_differences() {
        let mut lq = LqCoeffs::zeros(2, 1);
        lq.b1 = DMatrix::from_row_slice(2, 2, &[0.2, -0.1, 0.3, 0.0]).into();
        lq.b2 = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.4]).into();
        lq.c = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]).into();
        lq.d1 = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, 0.2]).into();
        lq.f = DMatrix::from_row_slice(2, 1, &[0.2, 0.1]).into();
        lq.g1 = DMatrix::identity(2, 2).into();
        lq.g2 = (DMatrix::identity(2, 2) * 0.5).into();
        let c = lq_to_control_coeffs(&lq).unwrap();
        let tri = DiscreteTriple::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.3, 0.3, 2.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let node = Node { k: 0, t: 0.0 };
        for _ in 0..20 {
            let args: Vec<DVector<f64>> = [2, 2, 1, 2, 2].iter().map(|&d| normal(&mut rng, d)).collect();
            let g = hamiltonian_gradients(&c, &tri, node, &args[0], &args[1], &args[2], &args[3], &args[4]);
            for (which, grad) in [(0, &g.x), (1, &g.x_mean), (2, &g.u)] {
                for j in 0..grad.len() {
                    let eps = 1e-5;
                    let mut a = args.clone();
                    let mut b = args.clone();
                    a[which][j] += eps;
                    b[which][j] -= eps;
                    let h = |z: &Vec<DVector<f64>>| hamiltonian(&c, &tri, node, &z[0], &z[1], &z[2], &z[3], &z[4]);
                    let fd = (h(&a) - h(&b)) / (2.0 * eps);
                    assert!((fd - grad[j]).abs() <= 1e-4 * (1.0 + grad[j].abs()), "{fd} vs {}", grad[j]);
                }
            }
        }
    }

    #[test]
    fn richardson_recovers_quadratic_slope() {
        // J(ε) = 3 + 2ε + 5ε²: central differences are exact, D = 2.
        let ladder: Vec<(f64, f64)> = [1e-1, 5e-2, 2.5e-2]
            .iter()
            .map(|&e| {
                let j = |s: f64| 3.0 + 2.0 * s + 5.0 * s * s;
                (e, (j(e) - j(-e)) / (2.0 * e))
            })
            .collect();
        let est = richardson(&ladder);
        assert!((est.value - 2.0).abs() < 1e-8);
        assert!(est.converged);
    }

    #[test]
    fn zero_direction_has_zero_derivative() {
        let prob = lq_problem(LqCoeffs::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0), 10, 3);
        let u = prob.zero_control(true);
        let est = fd_directional_derivative(&prob, &u, &prob.zero_control(true), &[1e-2, 5e-3]).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(fd_directional_derivative(&prob, &u, &u, &[1e-2, 2e-2]).is_err());
    }

    #[test]
    fn adjoint_gradient_matches_fd_on_scalar_lq() {
        let lq = LqCoeffs::scalar(0.3, -0.2, 1.0, 0.2, 0.1, 0.5, 1.0, 0.5, 1.0, 0.7, 0.3);
        let prob = lq_problem(lq, 16, 200);
        let grid = prob.grid;
        let u = ControlProcess::deterministic_from_fn(&grid, |_, t| DVector::from_element(1, 0.3 - t));
        let dir = ControlProcess::deterministic_from_fn(&grid, |k, _| DVector::from_element(1, ((k * 7) as f64).sin()));
        let eval = evaluate(&prob, &u).unwrap();
        let adj = directional_derivative(&eval.gradient, &dir, grid.dt()).unwrap();
        let fd = fd_directional_derivative(&prob, &u, &dir, &[1e-2, 5e-3, 2.5e-3]).unwrap();
        assert!((adj - fd.value).abs() <= 1e-6 * fd.value.abs().max(1e-9), "{adj} vs {}", fd.value);
    }

    #[test]
    fn concave_control_cost_fails_convexity() {
        let coeffs = FnControlCoeffs::zero(1, 1)
            .with_drift(
                |_, _, _, u| u.clone(),
                |_, _, _, _| Jacobians {
                    x: DMatrix::zeros(1, 1),
                    x_mean: DMatrix::zeros(1, 1),
                    u: DMatrix::identity(1, 1),
                },
            )
            .with_running_cost(
                |_, x, _, u| x[0] * x[0] - u[0] * u[0],
                |_, x, _, u| Gradients {
                    x: x * 2.0,
                    x_mean: DVector::zeros(1),
                    u: u * -2.0,
                },
            );
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::zero(&tri);
        let prob = ControlProblem::new(
            tri,
            op,
            Arc::new(coeffs),
            DVector::from_element(1, 1.0),
            ControlSet::Unconstrained,
            TimeGrid::new(1.0, 8).unwrap(),
            4,
            2,
        )
        .unwrap();
        let u = prob.zero_control(true);
        let eval = evaluate(&prob, &u).unwrap();
        let rep = check_sufficiency(&prob, &u, &eval.ensemble, &eval.adjoint, 20, 1).unwrap();
        assert!(!rep.hamiltonian_convex);
        assert!(!rep.certified());
    }

    #[test]
    fn zero_problem_has_zero_system_residual() {
        let mut lq = LqCoeffs::zeros(2, 1);
        lq.n_cost = DMatrix::identity(1, 1).into();
        let tri = DiscreteTriple::identity(2);
        let op = OperatorProcess::zero(&tri);
        let prob = ControlProblem::new(
            tri,
            op,
            Arc::new(lq_to_control_coeffs(&lq).unwrap()),
            DVector::zeros(2),
            ControlSet::Unconstrained,
            TimeGrid::new(1.0, 8).unwrap(),
            5,
            3,
        )
        .unwrap();
        let u = prob.zero_control(false);
        let eval = evaluate(&prob, &u).unwrap();
        let r = hamiltonian_system_residual(&prob, &u, &eval.ensemble, &eval.adjoint).unwrap();
        assert_eq!((r.forward, r.backward, r.minimum_condition), (0.0, 0.0, 0.0));
    }
}
