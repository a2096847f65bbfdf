//! Perturbation-scaling studies for the a priori and continuous-dependence
//! estimates. Each ladder point compares a base and a perturbed solve on
//! identical Brownian increments, and the study reports the log-log slope
//! of the left-hand side together with the empirical constant
//! `K̂ = max LHS/RHS`.

use nalgebra::{DMatrix, DVector};

use crate::backward::{energy, solve_backward, AdjointPair, BackwardProblem};
use crate::coeffs::MeanFieldMap;
use crate::exec::try_map_indexed;
use crate::forward::{simulate_with_noise, ForwardProblem, MeanFieldForm, Noise, ParticleEnsemble};
use crate::linalg::{column_mean, pairwise_mean, pairwise_sum};
use crate::regression::RegressionBasis;
use crate::triple::{DiscreteTriple, TimeGrid};
use crate::{Error, Result};

/// Least-squares fits need at least this many ladder points.
pub const MIN_LADDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    ForwardDependence,
    ForwardApriori,
    BackwardDependence,
}

impl StudyKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::ForwardDependence => "forward-dependence",
            Self::ForwardApriori => "forward-apriori",
            Self::BackwardDependence => "backward-dependence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderPoint {
    pub delta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

impl LadderPoint {
    fn new(delta: f64, lhs: f64, rhs: f64) -> Self {
        Self {
            delta,
            lhs,
            rhs,
            ratio: crate::backward::ratio(lhs, rhs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_log_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput("slope fit needs two or more paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Validation("slope fit needs finite positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = pairwise_mean(&lx);
    let my = pairwise_mean(&ly);
    let sxy: Vec<f64> = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).collect();
    let sxx: Vec<f64> = lx.iter().map(|x| (x - mx).powi(2)).collect();
    let sxx = pairwise_sum(&sxx);
    if sxx == 0.0 {
        return Err(Error::Validation("slope fit needs distinct abscissae".into()));
    }
    let slope = pairwise_sum(&sxy) / sxx;
    let intercept = my - slope * mx;
    let sq: Vec<f64> = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).collect();
    Ok(SlopeFit {
        slope,
        intercept,
        residual: pairwise_mean(&sq).sqrt(),
    })
}

/// `count` values `start, start·ratio, start·ratio², …`.
pub fn geometric_ladder(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start * ratio.powi(i as i32)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStudy {
    pub kind: StudyKind,
    pub points: Vec<LadderPoint>,
    pub fit: SlopeFit,
    pub k_hat: f64,
}

impl ScalingStudy {
    fn from_points(kind: StudyKind, points: Vec<LadderPoint>) -> Result<Self> {
        if points.iter().any(|p| !(p.lhs.is_finite() && p.rhs.is_finite())) {
            return Err(Error::NonFiniteCost("study measurement".into()));
        }
        if let Some(p) = points.iter().find(|p| p.rhs <= 0.0) {
            return Err(Error::Validation(format!(
                "degenerate study: right-hand side vanishes at delta = {}",
                p.delta
            )));
        }
        let deltas: Vec<f64> = points.iter().map(|p| p.delta).collect();
        let lhs: Vec<f64> = points.iter().map(|p| p.lhs).collect();
        let fit = fit_log_slope(&deltas, &lhs)?;
        let k_hat = points.iter().map(|p| p.ratio).fold(0.0, f64::max);
        Ok(Self { kind, points, fit, k_hat })
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.delta).collect()
    }

    /// `LHS` is nondecreasing in `δ` along the ladder.
    pub fn lhs_monotone(&self) -> bool {
        // the ladder is decreasing, so LHS must be too
        self.points.windows(2).all(|w| w[1].lhs <= w[0].lhs)
    }

    /// Spread of the per-point ratios relative to `K̂`.
    pub fn ratio_spread(&self) -> f64 {
        let lo = self.points.iter().map(|p| p.ratio).fold(f64::INFINITY, f64::min);
        if self.k_hat > 0.0 {
            (self.k_hat - lo) / self.k_hat
        } else {
            0.0
        }
    }

    pub fn slope_within(&self, target: f64, tol: f64) -> bool {
        (self.fit.slope - target).abs() <= tol
    }
}

fn check_ladder(deltas: &[f64]) -> Result<()> {
    if deltas.len() < MIN_LADDER {
        return Err(Error::InvalidInput(format!(
            "ladder needs at least {MIN_LADDER} points (got {})",
            deltas.len()
        )));
    }
    if deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidInput("ladder values must be finite and positive".into()));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("ladder must be strictly decreasing".into()));
    }
    Ok(())
}

/// Additive constant perturbations `b + δ·e_b`, `g + δ·e_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPerturbation {
    pub drift: Option<DVector<f64>>,
    pub diffusion: Option<DVector<f64>>,
}

impl ForwardPerturbation {
    pub fn drift(e: DVector<f64>) -> Self {
        Self { drift: Some(e), diffusion: None }
    }

    pub fn diffusion(e: DVector<f64>) -> Self {
        Self { drift: None, diffusion: Some(e) }
    }

    fn check(&self, n: usize) -> Result<()> {
        for e in self.drift.iter().chain(&self.diffusion) {
            crate::error::check_dim("perturbation direction", n, e.len())?;
        }
        Ok(())
    }

    fn apply(&self, problem: &ForwardProblem, delta: f64) -> ForwardProblem {
        let mut out = problem.clone();
        if let Some(e) = &self.drift {
            out.drift = problem.drift.shifted(e * delta);
        }
        if let Some(e) = &self.diffusion {
            out.diffusion = problem.diffusion.shifted(e * delta);
        }
        out
    }

    /// `∫‖δe_b‖²_H + ∫‖δe_g‖²_H` on the grid.
    fn size(&self, tri: &DiscreteTriple, grid: &TimeGrid, delta: f64) -> f64 {
        let per_step: f64 = self
            .drift
            .iter()
            .chain(&self.diffusion)
            .map(|e| tri.h_norm_sq(&(e * delta)))
            .sum();
        let steps = vec![grid.dt() * per_step; grid.steps()];
        pairwise_sum(&steps)
    }
}

/// `E[sup_k ‖Δ_k‖²_H] + E Σ_{k<N} dt‖Δ_k‖²_V` for `Δ_k = a_k − b_k`.
fn forward_energy(a: &ParticleEnsemble, b: Option<&ParticleEnsemble>, tri: &DiscreteTriple) -> f64 {
    let grid = a.grid();
    let dt = grid.dt();
    let per_path: Vec<f64> = (0..a.particles())
        .map(|i| {
            let mut sup: f64 = 0.0;
            let mut integral = Vec::with_capacity(grid.steps());
            for k in 0..=grid.steps() {
                let mut d = a.particle_state(k, i);
                if let Some(b) = b {
                    d -= b.particle_state(k, i);
                }
                sup = sup.max(tri.h_norm_sq(&d));
                if k < grid.steps() {
                    integral.push(dt * tri.v_norm_sq(&d));
                }
            }
            sup + pairwise_sum(&integral)
        })
        .collect();
    pairwise_mean(&per_path)
}

/// One ladder point of the forward dependence study on fixed noise. At
/// `δ = 0` both sides are exactly zero.
pub fn forward_dependence_point(
    problem: &ForwardProblem,
    base: &ParticleEnsemble,
    perturbation: &ForwardPerturbation,
    delta: f64,
) -> Result<LadderPoint> {
    perturbation.check(problem.dim())?;
    let perturbed = perturbation.apply(problem, delta);
    let ens = simulate_with_noise(&perturbed, base.grid(), base.noise().clone(), None)?;
    let lhs = forward_energy(&ens, Some(base), &problem.triple);
    let rhs = perturbation.size(&problem.triple, base.grid(), delta);
    Ok(LadderPoint::new(delta, lhs, rhs))
}

pub fn forward_dependence_study(
    problem: &ForwardProblem,
    perturbation: &ForwardPerturbation,
    deltas: &[f64],
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<ScalingStudy> {
    check_ladder(deltas)?;
    perturbation.check(problem.dim())?;
    let noise = Noise::generate(grid, particles, seed)?;
    let base = simulate_with_noise(problem, grid, noise, None)?;
    let points = try_map_indexed(deltas.len(), |j| {
        forward_dependence_point(problem, &base, perturbation, deltas[j])
    })?;
    ScalingStudy::from_points(StudyKind::ForwardDependence, points)
}

/// Problem with `x`, `b(·, 0, 0)` and `g(·, 0, 0)` all multiplied by `scale`.
pub fn scaled_data(problem: &ForwardProblem, scale: f64) -> ForwardProblem {
    let mut out = problem.clone();
    out.initial = &problem.initial * scale;
    out.drift = problem.drift.with_scaled_origin(scale);
    out.diffusion = problem.diffusion.with_scaled_origin(scale);
    out
}

fn data_size(problem: &ForwardProblem, grid: &TimeGrid) -> f64 {
    let tri = &problem.triple;
    let origin = |map: &MeanFieldMap| -> Vec<f64> {
        grid.nodes()
            .take(grid.steps())
            .map(|t| grid.dt() * tri.h_norm_sq(&map.at_origin(t)))
            .collect()
    };
    tri.h_norm_sq(&problem.initial) + pairwise_sum(&origin(&problem.drift)) + pairwise_sum(&origin(&problem.diffusion))
}

/// A priori study: `LHS = E[sup‖X‖²_H] + E∫‖X‖²_V` against
/// `RHS = ‖x‖²_H + ∫‖b(·,0,0)‖²_H + ∫‖g(·,0,0)‖²_H`, over a ladder of
/// scales applied to all three data at once.
pub fn forward_apriori_study(
    problem: &ForwardProblem,
    scales: &[f64],
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<ScalingStudy> {
    check_ladder(scales)?;
    let noise = Noise::generate(grid, particles, seed)?;
    let points = try_map_indexed(scales.len(), |j| forward_apriori_point(problem, &noise, grid, scales[j]))?;
    ScalingStudy::from_points(StudyKind::ForwardApriori, points)
}

pub fn forward_apriori_point(problem: &ForwardProblem, noise: &Noise, grid: &TimeGrid, scale: f64) -> Result<LadderPoint> {
    let scaled = scaled_data(problem, scale);
    let ens = simulate_with_noise(&scaled, grid, noise.clone(), None)?;
    let lhs = forward_energy(&ens, None, &problem.triple);
    Ok(LadderPoint::new(scale, lhs, data_size(&scaled, grid)))
}

/// Additive constant perturbations `ξ + δ·e_ξ`, `f + δ·e_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPerturbation {
    pub terminal: Option<DVector<f64>>,
    pub driver: Option<DVector<f64>>,
}

impl BackwardPerturbation {
    pub fn terminal(e: DVector<f64>) -> Self {
        Self { terminal: Some(e), driver: None }
    }

    pub fn driver(e: DVector<f64>) -> Self {
        Self { terminal: None, driver: Some(e) }
    }

    fn apply(&self, problem: &BackwardProblem, delta: f64) -> BackwardProblem {
        let mut out = problem.clone();
        if let Some(e) = &self.terminal {
            out = out.with_shifted_terminal(e * delta);
        }
        if let Some(e) = &self.driver {
            out = out.with_driver(problem.driver.shifted(e * delta));
        }
        out
    }

    fn size(&self, tri: &DiscreteTriple, grid: &TimeGrid, delta: f64) -> f64 {
        let terminal = self.terminal.as_ref().map_or(0.0, |e| tri.h_norm_sq(&(e * delta)));
        let driver = self.driver.as_ref().map_or(0.0, |e| tri.h_norm_sq(&(e * delta)));
        terminal + pairwise_sum(&vec![grid.dt() * driver; grid.steps()])
    }
}

/// Solver settings shared by the base and perturbed backward solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardSettings {
    pub basis: RegressionBasis,
    pub picard_tol: f64,
    pub max_picard: usize,
}

impl Default for BackwardSettings {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::affine(),
            picard_tol: 1e-10,
            max_picard: 50,
        }
    }
}

fn difference(a: &AdjointPair, b: &AdjointPair) -> AdjointPair {
    let mut out = a.clone();
    for (x, y) in out.p.iter_mut().zip(&b.p) {
        *x -= y;
    }
    for (x, y) in out.q.iter_mut().zip(&b.q) {
        *x -= y;
    }
    out
}

pub fn backward_dependence_point(
    problem: &BackwardProblem,
    base: &AdjointPair,
    perturbation: &BackwardPerturbation,
    delta: f64,
    ens: &ParticleEnsemble,
    settings: &BackwardSettings,
) -> Result<LadderPoint> {
    let n = problem.triple.dim();
    for e in perturbation.terminal.iter().chain(&perturbation.driver) {
        crate::error::check_dim("perturbation direction", n, e.len())?;
    }
    let perturbed = perturbation.apply(problem, delta);
    let pair = solve_backward(&perturbed, ens, &settings.basis, settings.picard_tol, settings.max_picard)?;
    let lhs = energy(&difference(&pair, base), &problem.triple, ens.grid().dt());
    let rhs = perturbation.size(&problem.triple, ens.grid(), delta);
    Ok(LadderPoint::new(delta, lhs, rhs))
}

/// Backward dependence study; `LHS` includes `E∫‖ΔZ‖²_H`. Base and
/// perturbed solves share the ensemble and the regression basis.
pub fn backward_dependence_study(
    problem: &BackwardProblem,
    perturbation: &BackwardPerturbation,
    deltas: &[f64],
    ens: &ParticleEnsemble,
    settings: &BackwardSettings,
) -> Result<ScalingStudy> {
    check_ladder(deltas)?;
    let base = solve_backward(problem, ens, &settings.basis, settings.picard_tol, settings.max_picard)?;
    let points = try_map_indexed(deltas.len(), |j| {
        backward_dependence_point(problem, &base, perturbation, deltas[j], ens, settings)
    })?;
    ScalingStudy::from_points(StudyKind::BackwardDependence, points)
}

/// Forward problem `dX = [−AX + B X + C 𝔼X] dt + [D X + E 𝔼X] dW` used by
/// the built-in studies.
pub fn linear_forward(
    triple: DiscreteTriple,
    operator: crate::triple::OperatorProcess,
    drift: (DMatrix<f64>, DMatrix<f64>),
    diffusion: (DMatrix<f64>, DMatrix<f64>),
    initial: DVector<f64>,
) -> Result<ForwardProblem> {
    let n = triple.dim();
    ForwardProblem::new(
        triple,
        operator,
        MeanFieldMap::affine(drift.0, drift.1, DVector::zeros(n))?,
        MeanFieldMap::affine(diffusion.0, diffusion.1, DVector::zeros(n))?,
        MeanFieldForm::EnsembleMean,
        initial,
    )
}

/// Ensemble mean of the state at the final node, for quick summaries.
pub fn terminal_mean(ens: &ParticleEnsemble) -> DVector<f64> {
    column_mean(ens.terminal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::BackwardDriver;
    use crate::triple::OperatorProcess;

    fn scalar_forward() -> ForwardProblem {
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::constant(&tri, DMatrix::from_element(1, 1, 0.5), 0.5).unwrap();
        linear_forward(
            tri,
            op,
            (DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.1)),
            (DMatrix::from_element(1, 1, 0.3), DMatrix::zeros(1, 1)),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let xs = [1.0, 0.5, 0.25, 0.125];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let fit = fit_log_slope(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
        assert!(fit_log_slope(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_delta_gives_zero_lhs() {
        let p = scalar_forward();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let base = simulate_with_noise(&p, &grid, Noise::generate(&grid, 50, 3).unwrap(), None).unwrap();
        let pt = forward_dependence_point(&p, &base, &ForwardPerturbation::drift(DVector::from_element(1, 1.0)), 0.0).unwrap();
        assert_eq!((pt.lhs, pt.rhs), (0.0, 0.0));
    }

    #[test]
    fn constant_drift_shift_scales_quadratically() {
        let p = scalar_forward();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let pert = ForwardPerturbation::drift(DVector::from_element(1, 1.0));
        let study = forward_dependence_study(&p, &pert, &geometric_ladder(1.0, 0.5, 4), &grid, 200, 5).unwrap();
        assert!(study.slope_within(2.0, 1e-6), "{study:?}");
        assert!(study.ratio_spread() < 1e-6);
        assert!(study.lhs_monotone());
    }

    #[test]
    fn apriori_doubling_quadruples() {
        let p = scalar_forward();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let study = forward_apriori_study(&p, &[2.0, 1.0, 0.5, 0.25], &grid, 100, 2).unwrap();
        let r = study.points[0].lhs / study.points[1].lhs;
        assert!((r - 4.0).abs() < 1e-9, "{r}");
        assert!(study.k_hat.is_finite());
    }

    #[test]
    fn zero_data_rejected_as_degenerate() {
        let mut p = scalar_forward();
        p.initial = DVector::zeros(1);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let pt = forward_apriori_point(&p, &Noise::generate(&grid, 10, 1).unwrap(), &grid, 1.0).unwrap();
        assert_eq!(pt.lhs, 0.0);
        assert!(matches!(
            forward_apriori_study(&p, &[1.0, 0.5, 0.25, 0.125], &grid, 10, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn ladder_validation() {
        let p = scalar_forward();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let pert = ForwardPerturbation::drift(DVector::from_element(1, 1.0));
        for bad in [vec![1.0, 0.5, 0.25], vec![1.0, 0.5, 0.5, 0.25], vec![0.1, 0.2, 0.3, 0.4]] {
            assert!(forward_dependence_study(&p, &pert, &bad, &grid, 10, 1).is_err());
        }
    }

    #[test]
    fn terminal_shift_scales_quadratically() {
        let fwd = scalar_forward();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate_with_noise(&fwd, &grid, Noise::generate(&grid, 200, 9).unwrap(), None).unwrap();
        let tri = DiscreteTriple::identity(1);
        let op = OperatorProcess::constant(&tri, DMatrix::from_element(1, 1, 0.5), 0.5).unwrap();
        let bwd = BackwardProblem::new(tri, op, BackwardDriver::zero(1), |p| p.terminal_state()).unwrap();
        let study = backward_dependence_study(
            &bwd,
            &BackwardPerturbation::terminal(DVector::from_element(1, 1.0)),
            &geometric_ladder(1.0, 0.5, 4),
            &ens,
            &BackwardSettings::default(),
        )
        .unwrap();
        assert!(study.slope_within(2.0, 1e-6), "{study:?}");
        assert!(study.lhs_monotone());
    }
}
