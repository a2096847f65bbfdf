//! Backward mean-field equations: a regression-based backward Euler sweep
//! inside a Picard iteration, and the linear adjoint equation of the
//! control problem.
//!
//! Sign convention: `dY = [A Y + 𝔼'f] dt + Z dW`, `Y(T) = ξ`, so one step
//! reads `(I + dt·A_k) Y_k = 𝔼_k[Y_{k+1}] − dt·f_k`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::coeffs::{BackwardDriver, ControlCoefficients, Node};
use crate::error::check_dim;
use crate::exec::try_map_indexed;
use crate::forward::{ControlProcess, ParticleEnsemble};
use crate::linalg::{column_mean, pairwise_mean, pairwise_sum};
use crate::regression::{FeatureSource, Projector, RegressionBasis};
use crate::triple::{DiscreteTriple, OperatorProcess, TimeGrid};
use crate::{Error, Result};

/// One particle's forward path, as seen by a terminal functional.
#[derive(Debug, Clone, Copy)]
pub struct PathRef<'a> {
    ens: &'a ParticleEnsemble,
    particle: usize,
}

impl PathRef<'_> {
    pub fn particle(&self) -> usize {
        self.particle
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.ens.particle_state(k, self.particle)
    }

    pub fn terminal_state(&self) -> DVector<f64> {
        self.state(self.ens.grid().steps())
    }

    pub fn brownian(&self, k: usize) -> f64 {
        self.ens.noise().brownian(k, self.particle)
    }

    pub fn terminal_brownian(&self) -> f64 {
        self.brownian(self.ens.grid().steps())
    }
}

type TerminalFn = dyn Fn(&PathRef<'_>) -> DVector<f64> + Send + Sync;

#[derive(Clone)]
pub struct BackwardProblem {
    pub triple: DiscreteTriple,
    pub operator: OperatorProcess,
    pub driver: BackwardDriver,
    terminal: Arc<TerminalFn>,
}

impl std::fmt::Debug for BackwardProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackwardProblem")
            .field("dim", &self.triple.dim())
            .field("driver", &self.driver)
            .finish()
    }
}

impl BackwardProblem {
    pub fn new<F>(triple: DiscreteTriple, operator: OperatorProcess, driver: BackwardDriver, terminal: F) -> Result<Self>
    where
        F: Fn(&PathRef<'_>) -> DVector<f64> + Send + Sync + 'static,
    {
        check_dim("operator dimension", triple.dim(), operator.dim())?;
        check_dim("driver dimension", triple.dim(), driver.dim())?;
        Ok(Self {
            triple,
            operator,
            driver,
            terminal: Arc::new(terminal),
        })
    }

    /// Same equation with terminal `ξ + shift`.
    pub fn with_shifted_terminal(&self, shift: DVector<f64>) -> Self {
        let inner = self.terminal.clone();
        Self {
            terminal: Arc::new(move |p| inner(p) + &shift),
            ..self.clone()
        }
    }

    /// Same equation with terminal `scale·ξ`.
    pub fn with_scaled_terminal(&self, scale: f64) -> Self {
        let inner = self.terminal.clone();
        Self {
            terminal: Arc::new(move |p| inner(p) * scale),
            ..self.clone()
        }
    }

    pub fn with_driver(&self, driver: BackwardDriver) -> Self {
        Self {
            driver,
            ..self.clone()
        }
    }

    /// `ξ` on every path, `n × M`.
    pub fn terminal_values(&self, ens: &ParticleEnsemble) -> Result<DMatrix<f64>> {
        let n = self.triple.dim();
        let cols: Vec<DVector<f64>> = try_map_indexed(ens.particles(), |i| {
            let xi = (self.terminal)(&PathRef { ens, particle: i });
            check_dim("terminal value", n, xi.len())?;
            if xi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("terminal value is non-finite on path {i}")));
            }
            Ok(xi)
        })?;
        Ok(DMatrix::from_columns(&cols))
    }
}

/// Solution `(p, q)` (or `(Y, Z)`) on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPair {
    /// `N + 1` matrices of shape `n × M`.
    pub p: Vec<DMatrix<f64>>,
    /// `N` matrices of shape `n × M`.
    pub q: Vec<DMatrix<f64>>,
    pub picard_iterations: usize,
    pub picard_residual: f64,
    pub residual_history: Vec<f64>,
}

impl AdjointPair {
    pub fn zeros(n: usize, steps: usize, particles: usize) -> Self {
        Self {
            p: vec![DMatrix::zeros(n, particles); steps + 1],
            q: vec![DMatrix::zeros(n, particles); steps],
            picard_iterations: 0,
            picard_residual: 0.0,
            residual_history: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.q.len()
    }

    pub fn particles(&self) -> usize {
        self.p[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.p[0].nrows()
    }

    pub fn p_at(&self, k: usize, i: usize) -> DVector<f64> {
        self.p[k].column(i).into_owned()
    }

    pub fn q_at(&self, k: usize, i: usize) -> DVector<f64> {
        self.q[k].column(i).into_owned()
    }

    pub fn p_mean(&self, k: usize) -> DVector<f64> {
        column_mean(&self.p[k])
    }

    pub fn q_mean(&self, k: usize) -> DVector<f64> {
        column_mean(&self.q[k])
    }

    /// Largest node-wise ensemble `L²(H)` distance between the two pairs.
    pub fn distance(&self, other: &Self, triple: &DiscreteTriple) -> f64 {
        let node = |a: &DMatrix<f64>, b: &DMatrix<f64>| ensemble_l2(&(a - b), triple);
        let dp = self.p.iter().zip(&other.p).map(|(a, b)| node(a, b));
        let dq = self.q.iter().zip(&other.q).map(|(a, b)| node(a, b));
        dp.chain(dq).fold(0.0, f64::max)
    }
}

/// `sqrt(mean_i ‖x_i‖²_H)` over the columns of `x`.
pub fn ensemble_l2(x: &DMatrix<f64>, triple: &DiscreteTriple) -> f64 {
    let sq: Vec<f64> = (0..x.ncols())
        .map(|i| triple.h_norm_sq(&x.column(i).into_owned()))
        .collect();
    pairwise_mean(&sq).max(0.0).sqrt()
}

fn scale_columns(x: &DMatrix<f64>, weights: &[f64], factor: f64) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, w) in weights.iter().enumerate() {
        out.column_mut(i).scale_mut(w * factor);
    }
    out
}

fn projectors(ens: &ParticleEnsemble, basis: &RegressionBasis) -> Result<Vec<Projector>> {
    (0..ens.grid().steps())
        .map(|k| basis.projector(ens.state(k), ens.noise().brownian_at(k), k))
        .collect()
}

fn implicit_solvers(operator: &OperatorProcess, grid: &TimeGrid, transpose: bool) -> Result<Vec<LU<f64, Dyn, Dyn>>> {
    operator.check_grid(grid)?;
    let n = operator.dim();
    let count = if operator.is_constant() { 1 } else { grid.steps() };
    (0..count)
        .map(|k| {
            let mut m = DMatrix::identity(n, n) + operator.at(k) * grid.dt();
            if transpose {
                m.transpose_mut();
            }
            let lu = m.lu();
            if lu.is_invertible() {
                Ok(lu)
            } else {
                Err(Error::SingularOperator { node: k })
            }
        })
        .collect()
}

/// Picard/backward-Euler solver. The mean-field arguments and `y` in the
/// driver come from the previous iterate; `Z_k` is the projection of
/// `(Y_{k+1} − 𝔼_k[Y_{k+1}])·ΔW_k/dt`.
///
/// The reported iteration count excludes the final sweep that confirms
/// the fixed point, so a problem solved by the first sweep reports 1.
pub fn solve_backward(
    problem: &BackwardProblem,
    ens: &ParticleEnsemble,
    basis: &RegressionBasis,
    picard_tol: f64,
    max_picard: usize,
) -> Result<AdjointPair> {
    if !(picard_tol > 0.0) {
        return Err(Error::InvalidInput("Picard tolerance must be positive".into()));
    }
    if max_picard == 0 {
        return Err(Error::InvalidInput("at least one Picard iteration is required".into()));
    }
    let n = problem.triple.dim();
    check_dim("ensemble dimension", n, ens.dim())?;
    let grid = *ens.grid();
    let xi = problem.terminal_values(ens)?;
    let proj = projectors(ens, basis)?;
    let solvers = implicit_solvers(&problem.operator, &grid, false)?;
    let mut prev = AdjointPair::zeros(n, grid.steps(), ens.particles());
    let mut history = Vec::new();
    for sweep in 1..=max_picard + 1 {
        let mut next = backward_sweep(problem, ens, &xi, &proj, &solvers, &prev)?;
        let residual = next.distance(&prev, &problem.triple);
        history.push(residual);
        if residual <= picard_tol {
            next.picard_iterations = (sweep - 1).max(1);
            next.picard_residual = residual;
            next.residual_history = history;
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::PicardNonConvergence { residuals: history })
}

fn backward_sweep(
    problem: &BackwardProblem,
    ens: &ParticleEnsemble,
    xi: &DMatrix<f64>,
    proj: &[Projector],
    solvers: &[LU<f64, Dyn, Dyn>],
    prev: &AdjointPair,
) -> Result<AdjointPair> {
    let grid = ens.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let n = xi.nrows();
    let mut out = AdjointPair::zeros(n, steps, ens.particles());
    out.p[steps] = xi.clone();
    for k in (0..steps).rev() {
        let t = grid.node(k);
        let dw = ens.noise().increments_at(k);
        let y_next = &out.p[k + 1];
        let y_hat = proj[k].project(y_next)?;
        let z = proj[k].project(&scale_columns(&(y_next - &y_hat), dw, 1.0 / dt))?;
        let y_bar = prev.p_mean(k);
        let z_bar = prev.q_mean(k);
        let lu = &solvers[k.min(solvers.len() - 1)];
        let cols: Vec<DVector<f64>> = try_map_indexed(ens.particles(), |i| {
            let zi = z.column(i).into_owned();
            let f = problem.driver.eval(t, &y_bar, &z_bar, &prev.p_at(k, i), &zi);
            let rhs = y_hat.column(i) - f * dt;
            let y = lu.solve(&rhs).ok_or(Error::SingularOperator { node: k })?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { step: k, particle: i });
            }
            Ok(y)
        })?;
        out.p[k] = DMatrix::from_columns(&cols);
        out.q[k] = z;
    }
    Ok(out)
}

/// Adjoint of the controlled system, computed as the exact discrete adjoint
/// of the forward scheme on each path and then projected on the regression
/// basis at every node.
///
/// With `S_k = (I + dt·A_k)⁻¹` and `y_k = S_kᵀ λ_{k+1}`:
///
/// - `λ_N = Φ_x + 𝔼[Φ_{x'}]`,
/// - `λ_k = dt·l_x + y_k + (dt·h_x + ΔW_k·g_x)ᵀ y_k + 𝔼[dt·l_{x'} + (dt·h_{x'} + ΔW_k·g_{x'})ᵀ y_k]`,
/// - `p_k = G_H⁻¹ 𝔼_k[y_k]`, `q_k = G_H⁻¹ 𝔼_k[ΔW_k·y_k]/dt`, `p_N = G_H⁻¹ λ_N`.
///
/// For linear-quadratic coefficients the basis is forced to be affine in
/// the state.
pub fn solve_linear_adjoint(
    coeffs: &dyn ControlCoefficients,
    triple: &DiscreteTriple,
    operator: &OperatorProcess,
    ens: &ParticleEnsemble,
    control: &ControlProcess,
    basis: &RegressionBasis,
) -> Result<AdjointPair> {
    let n = triple.dim();
    check_dim("ensemble dimension", n, ens.dim())?;
    check_dim("coefficient state dimension", n, coeffs.state_dim())?;
    check_dim("operator dimension", n, operator.dim())?;
    let grid = *ens.grid();
    let particles = ens.particles();
    control.check(&grid, particles, coeffs.control_dim())?;
    let basis = if coeffs.as_lq().is_some() {
        RegressionBasis::new(1, basis.ridge(), FeatureSource::State)?
    } else {
        *basis
    };
    let proj = projectors(ens, &basis)?;
    let solvers = implicit_solvers(operator, &grid, true)?;
    let steps = grid.steps();
    let dt = grid.dt();
    let mut out = AdjointPair::zeros(n, steps, particles);

    let x_n = ens.terminal();
    let mean_n = column_mean(x_n);
    let grads: Vec<(DVector<f64>, DVector<f64>)> = try_map_indexed(particles, |i| {
        Ok::<_, Error>(coeffs.terminal_cost_gradients(&x_n.column(i).into_owned(), &mean_n))
    })?;
    let cross = vector_mean(grads.iter().map(|g| &g.1));
    let mut lambda = DMatrix::from_columns(&grads.iter().map(|g| &g.0 + &cross).collect::<Vec<_>>());
    out.p[steps] = triple.h_riesz_matrix(&lambda);

    for k in (0..steps).rev() {
        let node = Node::on(&grid, k);
        let lu = &solvers[k.min(solvers.len() - 1)];
        let x = ens.state(k);
        let mean = column_mean(x);
        let dw = ens.noise().increments_at(k);
        let terms: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> = try_map_indexed(particles, |i| {
            let y = lu
                .solve(&lambda.column(i).into_owned())
                .ok_or(Error::SingularOperator { node: k })?;
            let xi = x.column(i).into_owned();
            let ui = control.value(k, i);
            let hj = coeffs.drift_jacobians(node, &xi, &mean, &ui);
            let gj = coeffs.diffusion_jacobians(node, &xi, &mean, &ui);
            let lg = coeffs.running_cost_gradients(node, &xi, &mean, &ui);
            let local = &lg.x * dt + &y + (&hj.x * dt + &gj.x * dw[i]).tr_mul(&y);
            let cross = &lg.x_mean * dt + (&hj.x_mean * dt + &gj.x_mean * dw[i]).tr_mul(&y);
            if local.iter().chain(cross.iter()).any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { step: k, particle: i });
            }
            Ok((y, local, cross))
        })?;
        let cross = vector_mean(terms.iter().map(|t| &t.2));
        let y = DMatrix::from_columns(&terms.iter().map(|t| t.0.clone()).collect::<Vec<_>>());
        lambda = DMatrix::from_columns(&terms.iter().map(|t| &t.1 + &cross).collect::<Vec<_>>());
        let p = proj[k].project(&y)?;
        let q = proj[k].project(&scale_columns(&y, dw, 1.0 / dt))?;
        out.p[k] = triple.h_riesz_matrix(&p);
        out.q[k] = triple.h_riesz_matrix(&q);
    }
    out.picard_iterations = 1;
    Ok(out)
}

fn vector_mean<'a>(vs: impl Iterator<Item = &'a DVector<f64>>) -> DVector<f64> {
    let owned: Vec<DVector<f64>> = vs.cloned().collect();
    crate::linalg::vector_mean(&owned)
}

/// Empirical sides of the backward a priori estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriReport {
    /// `E[sup_k ‖Y_k‖²_H] + E Σ dt‖Y_k‖²_V + E Σ dt‖Z_k‖²_H`.
    pub lhs: f64,
    /// `E‖ξ‖²_H + Σ dt‖f(t_k, 0, 0, 0, 0)‖²_H`.
    pub rhs: f64,
    pub ratio: f64,
}

pub fn bspde_apriori_check(pair: &AdjointPair, problem: &BackwardProblem, ens: &ParticleEnsemble) -> Result<AprioriReport> {
    let tri = &problem.triple;
    let grid = ens.grid();
    let dt = grid.dt();
    let xi = problem.terminal_values(ens)?;
    let lhs = energy(pair, tri, dt);
    let xi_sq: Vec<f64> = (0..xi.ncols()).map(|i| tri.h_norm_sq(&xi.column(i).into_owned())).collect();
    let f0: Vec<f64> = (0..grid.steps())
        .map(|k| dt * tri.h_norm_sq(&problem.driver.at_origin(grid.node(k))))
        .collect();
    let rhs = pairwise_mean(&xi_sq) + pairwise_sum(&f0);
    Ok(AprioriReport { lhs, rhs, ratio: ratio(lhs, rhs) })
}

/// `E[sup ‖Y‖²_H] + E∫‖Y‖²_V + E∫‖Z‖²_H` with the rectangle rule.
pub fn energy(pair: &AdjointPair, tri: &DiscreteTriple, dt: f64) -> f64 {
    let per_path: Vec<f64> = (0..pair.particles())
        .map(|i| {
            let mut sup: f64 = 0.0;
            let mut integral = Vec::with_capacity(pair.steps());
            for k in 0..=pair.steps() {
                let y = pair.p_at(k, i);
                sup = sup.max(tri.h_norm_sq(&y));
                if k < pair.steps() {
                    integral.push(dt * (tri.v_norm_sq(&y) + tri.h_norm_sq(&pair.q_at(k, i))));
                }
            }
            sup + pairwise_sum(&integral)
        })
        .collect();
    pairwise_mean(&per_path)
}

pub(crate) fn ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::MeanFieldMap;
    use crate::forward::{simulate, ForwardProblem, MeanFieldForm};

    fn brownian_ensemble(steps: usize, particles: usize, seed: u64) -> ParticleEnsemble {
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::zero(&tri);
        let p = ForwardProblem::new(
            tri,
            op,
            MeanFieldMap::zero(1),
            MeanFieldMap::constant(DVector::from_element(1, 1.0)),
            MeanFieldForm::EnsembleMean,
            DVector::zeros(1),
        )
        .unwrap();
        simulate(&p, &TimeGrid::new(1.0, steps).unwrap(), particles, seed, None).unwrap()
    }

    fn problem(driver: BackwardDriver, terminal: impl Fn(&PathRef<'_>) -> DVector<f64> + Send + Sync + 'static) -> BackwardProblem {
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::zero(&tri);
        BackwardProblem::new(tri, op, driver, terminal).unwrap()
    }

    #[test]
    fn constant_terminal_is_exact() {
        let ens = brownian_ensemble(16, 200, 1);
        let pb = problem(BackwardDriver::zero(1), |_| DVector::from_element(1, 2.5));
        let sol = solve_backward(&pb, &ens, &RegressionBasis::affine(), 1e-12, 10).unwrap();
        assert_eq!(sol.picard_iterations, 1);
        for k in 0..=16 {
            assert!(sol.p[k].iter().all(|v| (v - 2.5).abs() <= 1e-12));
        }
        assert!(sol.q.iter().all(|z| z.amax() <= 1e-12));
    }

    #[test]
    fn constant_driver_gives_linear_decay() {
        let ens = brownian_ensemble(16, 100, 2);
        let pb = problem(BackwardDriver::constant(DVector::from_element(1, 1.0)), |_| DVector::zeros(1));
        let sol = solve_backward(&pb, &ens, &RegressionBasis::affine(), 1e-12, 10).unwrap();
        let grid = ens.grid();
        for k in 0..=16 {
            let exact = -(grid.horizon() - grid.node(k));
            assert!(sol.p[k].iter().all(|v| (v - exact).abs() <= 1e-10));
        }
    }

    #[test]
    fn picard_failure_carries_history() {
        let ens = brownian_ensemble(8, 50, 3);
        let driver = BackwardDriver::new(1, 1.0, |_, ym, _, _, _| ym.clone());
        let pb = problem(driver, |_| DVector::from_element(1, 1.0));
        match solve_backward(&pb, &ens, &RegressionBasis::affine(), 1e-14, 2) {
            Err(Error::PicardNonConvergence { residuals }) => assert_eq!(residuals.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_data_gives_zero_energy() {
        let ens = brownian_ensemble(8, 20, 4);
        let pb = problem(BackwardDriver::zero(1), |_| DVector::zeros(1));
        let sol = solve_backward(&pb, &ens, &RegressionBasis::affine(), 1e-12, 5).unwrap();
        let rep = bspde_apriori_check(&sol, &pb, &ens).unwrap();
        assert_eq!((rep.lhs, rep.rhs, rep.ratio), (0.0, 0.0, 0.0));
    }
}
