//! Linear-quadratic problems: the dual control formula and a damped
//! fixed-point solver for the coupled forward/adjoint system.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backward::AdjointPair;
use crate::coeffs::{lq_to_control_coeffs, LqCoeffs};
use crate::control::{cost, ControlProblem};
use crate::error::check_dim;
use crate::forward::{ControlProcess, ControlSet, ParticleEnsemble};
use crate::linalg::{pairwise_mean, pairwise_sum};
use crate::triple::{DiscreteTriple, OperatorProcess, TimeGrid};
use crate::{Error, Result};

/// A validated linear-quadratic control problem on a fixed noise sample.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub coeffs: LqCoeffs,
    control: ControlProblem,
}

impl LqProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        triple: DiscreteTriple,
        operator: OperatorProcess,
        coeffs: LqCoeffs,
        initial: DVector<f64>,
        grid: TimeGrid,
        particles: usize,
        seed: u64,
    ) -> Result<Self> {
        check_dim("LQ state dimension", triple.dim(), coeffs.state_dim())?;
        let node_count = coeffs.node_count();
        if node_count > 1 && node_count != grid.steps() + 1 && node_count != grid.steps() {
            return Err(Error::DimensionMismatch {
                what: "LQ coefficient nodes",
                expected: grid.steps() + 1,
                found: node_count,
            });
        }
        let ctl = lq_to_control_coeffs(&coeffs)?;
        let control = ControlProblem::new(
            triple,
            operator,
            Arc::new(ctl),
            initial,
            ControlSet::Unconstrained,
            grid,
            particles,
            seed,
        )?;
        Ok(Self { coeffs, control })
    }

    pub fn control_problem(&self) -> &ControlProblem {
        &self.control
    }

    pub fn triple(&self) -> &DiscreteTriple {
        self.control.triple()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.control.grid
    }

    pub fn particles(&self) -> usize {
        self.control.particles()
    }

    pub fn cost_of(&self, u: &ControlProcess) -> Result<f64> {
        self.control.cost_of(u)
    }

    /// `C*p + F*q + 2Nu` in control coordinates.
    pub fn control_gradient(&self, k: usize, p: &DVector<f64>, q: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let w = self.triple().gram_h();
        self.coeffs.c.at(k).tr_mul(&(w * p)) + self.coeffs.f.at(k).tr_mul(&(w * q)) + self.coeffs.n_cost.at(k) * u * 2.0
    }

    /// Dual control at every path of step `k` (`m × M`).
    fn dual_at(&self, k: usize, adj: &AdjointPair) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..adj.particles())
            .map(|i| dual_control(&adj.p_at(k, i), &adj.q_at(k, i), &self.coeffs, self.triple(), k))
            .collect();
        DMatrix::from_columns(&cols)
    }

    /// Ensemble `L²` norm of `C*p + F*q + 2Nu` over the whole grid.
    pub fn dual_residual(&self, u: &ControlProcess, adj: &AdjointPair) -> f64 {
        let dt = self.grid().dt();
        let per_step: Vec<f64> = (0..self.grid().steps())
            .map(|k| {
                if u.is_deterministic() {
                    let g = self.control_gradient(k, &adj.p_mean(k), &adj.q_mean(k), &u.value(k, 0));
                    dt * g.norm_squared()
                } else {
                    let sq: Vec<f64> = (0..adj.particles())
                        .map(|i| self.control_gradient(k, &adj.p_at(k, i), &adj.q_at(k, i), &u.value(k, i)).norm_squared())
                        .collect();
                    dt * pairwise_mean(&sq)
                }
            })
            .collect();
        pairwise_sum(&per_step).sqrt()
    }
}

/// `ū = −½ N⁻¹ (C*p + F*q)` with `C* = Cᵀ G_H`, `F* = Fᵀ G_H`.
pub fn dual_control(p: &DVector<f64>, q: &DVector<f64>, lq: &LqCoeffs, triple: &DiscreteTriple, k: usize) -> DVector<f64> {
    let w = triple.gram_h();
    let rhs = lq.c.at(k).tr_mul(&(w * p)) + lq.f.at(k).tr_mul(&(w * q));
    let n = lq.n_cost.at(k);
    let solved = match n.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => n.clone().lu().solve(&rhs).expect("N is uniformly positive"),
    };
    solved * -0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Iterate over deterministic (per-step) controls instead of adapted ones.
    pub deterministic: bool,
    /// Replace `damping` by [`estimate_damping`] before iterating.
    pub auto_damping: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-9,
            max_iter: 500,
            deterministic: false,
            auto_damping: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LqSolution {
    pub control: ControlProcess,
    pub ensemble: ParticleEnsemble,
    pub adjoint: AdjointPair,
    pub iterations: usize,
    /// Ensemble-`L²` size of the last control update.
    pub change: f64,
    pub history: Vec<f64>,
    pub cost: f64,
    /// Damping actually used.
    pub damping: f64,
}

/// Damped iteration `u ← (1 − θ)u + θ·ū(p, q)`. The returned tuple is the
/// last input control together with its state and adjoint.
pub fn solve_fixed_point(prob: &LqProblem, options: FixedPointOptions, init: Option<&ControlProcess>) -> Result<LqSolution> {
    let theta = if options.auto_damping {
        estimate_damping(prob, options.deterministic, 20, prob.control.seed())?
    } else {
        options.damping
    };
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidInput(format!("damping must lie in (0, 1] (got {theta})")));
    }
    if !(options.tol > 0.0) || options.max_iter == 0 {
        return Err(Error::InvalidInput("tolerance must be positive and max_iter at least 1".into()));
    }
    let ctl = &prob.control;
    let mut u = match init {
        Some(u) => u.clone(),
        None => ctl.zero_control(options.deterministic),
    };
    let dt = prob.grid().dt();
    let mut history = Vec::new();
    for iteration in 1..=options.max_iter {
        let (ens, adj, dual) = dual_map(prob, &u)?;
        let next = u.combine(1.0 - theta, &dual, theta)?;
        let change = next.combine(1.0, &u, -1.0)?.norm_sq(dt).sqrt();
        history.push(change);
        if !change.is_finite() {
            return Err(Error::FixedPointNonConvergence { history });
        }
        if change <= options.tol {
            let cost = cost(ctl, &u, &ens)?;
            return Ok(LqSolution {
                control: u,
                ensemble: ens,
                adjoint: adj,
                iterations: iteration,
                change,
                history,
                cost,
                damping: theta,
            });
        }
        u = next;
    }
    Err(Error::FixedPointNonConvergence { history })
}

/// One forward-adjoint pass: `u ↦ ū(p(u), q(u))`.
fn dual_map(prob: &LqProblem, u: &ControlProcess) -> Result<(ParticleEnsemble, AdjointPair, ControlProcess)> {
    let ctl = &prob.control;
    let ens = ctl.simulate(u)?;
    let adj = ctl.adjoint(&ens, u)?;
    let dual = if u.is_deterministic() {
        ControlProcess::Deterministic(
            (0..prob.grid().steps())
                .map(|k| dual_control(&adj.p_mean(k), &adj.q_mean(k), &prob.coeffs, prob.triple(), k))
                .collect(),
        )
    } else {
        ControlProcess::Adapted((0..prob.grid().steps()).map(|k| prob.dual_at(k, &adj)).collect())
    };
    Ok((ens, adj, dual))
}

/// Damping that makes the fixed-point iteration contract.
///
/// The update is `u ← u − θ·R u + const` with `R u = u − ū(u) + ū(0)`,
/// whose spectrum lies in `[1, r]` for convex problems. Power iteration
/// estimates `r`; the returned `θ = 2/(1 + 1.05·r)` (capped at 1) keeps
/// every mode contracting.
pub fn estimate_damping(prob: &LqProblem, deterministic: bool, iterations: usize, seed: u64) -> Result<f64> {
    let grid = prob.grid();
    let dt = grid.dt();
    let m = prob.coeffs.control_dim();
    let particles = prob.particles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut v = if deterministic {
        ControlProcess::Deterministic((0..grid.steps()).map(|_| draw(m, 1).column(0).into_owned()).collect())
    } else {
        ControlProcess::Adapted((0..grid.steps()).map(|_| draw(m, particles)).collect())
    };
    let zero = prob.control.zero_control(deterministic);
    let (_, _, base) = dual_map(prob, &zero)?;
    let mut radius: f64 = 1.0;
    for _ in 0..iterations.max(1) {
        let norm = v.norm_sq(dt).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        v = v.map(|x| x / norm);
        let (_, _, image) = dual_map(prob, &v)?;
        let w = v.combine(1.0, &image.combine(1.0, &base, -1.0)?, -1.0)?;
        radius = w.norm_sq(dt).sqrt();
        v = w;
    }
    Ok((2.0 / (1.0 + 1.05 * radius.max(1.0))).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityReport {
    /// `J(u) / E∫‖u‖²` per sampled control.
    pub ratios: Vec<f64>,
    pub min_ratio: f64,
    pub floor: f64,
    pub passed: bool,
}

fn random_control(rng: &mut ChaCha8Rng, m: usize, steps: usize) -> ControlProcess {
    let amplitude = 0.1 + 2.0 * rng.random::<f64>();
    ControlProcess::Deterministic(
        (0..steps)
            .map(|_| DVector::from_fn(m, |_, _| amplitude * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    )
}

/// Samples `J(u) / E∫‖u‖²` over random deterministic controls; passes iff
/// every ratio is at least `0.95·k`.
pub fn verify_coercivity(prob: &LqProblem, samples: usize, seed: u64) -> Result<CoercivityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = prob.coeffs.control_dim();
    let dt = prob.grid().dt();
    let mut ratios = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u = random_control(&mut rng, m, prob.grid().steps());
        ratios.push(prob.cost_of(&u)? / u.norm_sq(dt));
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = prob.coeffs.positivity;
    Ok(CoercivityReport {
        passed: min_ratio >= floor * 0.95,
        ratios,
        min_ratio,
        floor,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    /// `½J(u₁) + ½J(u₂) − J(½u₁ + ½u₂)` per pair.
    pub gaps: Vec<f64>,
    /// `k·E∫‖u₁ − u₂‖²/4` per pair.
    pub margins: Vec<f64>,
    /// Jensen holds on every pair (up to round-off).
    pub jensen: bool,
    /// The gap dominates the strict-convexity margin on every pair.
    pub strict: bool,
}

/// Sampled Jensen inequality for `J` on random pairs with shared noise.
pub fn check_convexity(prob: &LqProblem, pairs: usize, seed: u64) -> Result<ConvexityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = prob.coeffs.control_dim();
    let steps = prob.grid().steps();
    let dt = prob.grid().dt();
    let (mut gaps, mut margins) = (Vec::new(), Vec::new());
    let (mut jensen, mut strict) = (true, true);
    for _ in 0..pairs {
        let u1 = random_control(&mut rng, m, steps);
        let u2 = random_control(&mut rng, m, steps);
        let mid = u1.combine(0.5, &u2, 0.5)?;
        let (j1, j2, jm) = (prob.cost_of(&u1)?, prob.cost_of(&u2)?, prob.cost_of(&mid)?);
        let gap = 0.5 * (j1 + j2) - jm;
        let margin = prob.coeffs.positivity * u1.combine(1.0, &u2, -1.0)?.norm_sq(dt) / 4.0;
        let slack = 1e-9 * (j1.abs() + j2.abs());
        jensen &= gap >= -slack;
        strict &= gap >= margin - slack;
        gaps.push(gap);
        margins.push(margin);
    }
    Ok(ConvexityReport {
        gaps,
        margins,
        jensen,
        strict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn dual_control_examples() {
        let tri = DiscreteTriple::identity(1);
        let lq = LqCoeffs::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        assert_eq!(dual_control(&v(0.0), &v(0.0), &lq, &tri, 0)[0], 0.0);
        assert_eq!(dual_control(&v(2.0), &v(0.0), &lq, &tri, 0)[0], -1.0);
        let lq = LqCoeffs::scalar(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0);
        assert!((dual_control(&v(0.0), &v(4.0), &lq, &tri, 0)[0] + 1.0).abs() < 1e-15);
    }

    fn problem(lq: LqCoeffs, steps: usize, particles: usize) -> LqProblem {
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::zero(&tri);
        LqProblem::new(tri, op, lq, v(1.0), TimeGrid::new(1.0, steps).unwrap(), particles, 5).unwrap()
    }

    #[test]
    fn zero_costs_converge_immediately() {
        let prob = problem(LqCoeffs::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), 10, 4);
        let sol = solve_fixed_point(&prob, FixedPointOptions::default(), None).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn riccati_cost_without_mean_field() {
        let prob = problem(LqCoeffs::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0), 200, 2);
        let sol = solve_fixed_point(&prob, FixedPointOptions::default(), None).unwrap();
        let exact = 1f64.tanh();
        assert!((sol.cost - exact).abs() <= 0.02 * exact, "{}", sol.cost);
        assert!(prob.dual_residual(&sol.control, &sol.adjoint) <= 1e-6);
    }

    #[test]
    fn damping_out_of_range_is_rejected() {
        let prob = problem(LqCoeffs::zeros(1, 1), 4, 2);
        let opts = FixedPointOptions {
            damping: 0.0,
            ..Default::default()
        };
        assert!(solve_fixed_point(&prob, opts, None).is_err());
    }

    #[test]
    fn pure_control_cost_has_unit_ratio() {
        let prob = problem(LqCoeffs::scalar(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), 8, 3);
        let rep = verify_coercivity(&prob, 5, 1).unwrap();
        assert!(rep.ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert!(rep.passed);
    }
}
