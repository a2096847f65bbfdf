//! The one-dimensional divergence-form Cauchy problem, truncated to
//! `[−L, L]` with homogeneous Dirichlet conditions and discretized by
//! finite differences on `n` interior nodes into a linear-quadratic problem.
//!
//! The principal operator is
//! `A φ = −∂_z(a ∂_z φ) − b ∂_z φ − c φ`, with the state equation
//! `dy = [−A y + η 𝔼y + u] dt + [ρ y + σ 𝔼y + u] dW`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::backward::ensemble_l2;
use crate::coeffs::{LqCoeffs, NodeTable};
use crate::forward::{simulate_with_noise, ControlProcess, ForwardProblem, MeanFieldForm};
use crate::coeffs::MeanFieldMap;
use crate::linalg::pairwise_sum;
use crate::lq::{solve_fixed_point, FixedPointOptions, LqProblem, LqSolution};
use crate::triple::{dirichlet_stiffness, DiscreteTriple, OperatorProcess, TimeGrid};
use crate::{Error, Result};

type ScalarField = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// A coefficient `(t, z) ↦ f(t, z)` together with `∂_z f`.
#[derive(Clone)]
pub enum Profile {
    Constant(f64),
    /// `base + amplitude·sin(frequency·z)`.
    SinBump { base: f64, amplitude: f64, frequency: f64 },
    /// `base + amplitude·exp(−(z − center)²/(2·width²))`.
    Gaussian { base: f64, amplitude: f64, center: f64, width: f64 },
    Custom { value: Arc<ScalarField>, dz: Arc<ScalarField> },
}

impl std::fmt::Debug for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::SinBump { base, amplitude, frequency } => {
                write!(f, "SinBump({base} + {amplitude}·sin({frequency}·z))")
            }
            Self::Gaussian { base, amplitude, center, width } => {
                write!(f, "Gaussian({base} + {amplitude}·exp(-(z-{center})²/2·{width}²))")
            }
            Self::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl Profile {
    pub fn custom<F, D>(value: F, dz: D) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self::Custom {
            value: Arc::new(value),
            dz: Arc::new(dz),
        }
    }

    pub fn value(&self, t: f64, z: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::SinBump { base, amplitude, frequency } => base + amplitude * (frequency * z).sin(),
            Self::Gaussian { base, amplitude, center, width } => {
                base + amplitude * (-(z - center).powi(2) / (2.0 * width * width)).exp()
            }
            Self::Custom { value, .. } => value(t, z),
        }
    }

    pub fn dz(&self, t: f64, z: f64) -> f64 {
        match self {
            Self::Constant(_) => 0.0,
            Self::SinBump { amplitude, frequency, .. } => amplitude * frequency * (frequency * z).cos(),
            Self::Gaussian { amplitude, center, width, .. } => {
                let s = (z - center) / (width * width);
                -amplitude * s * (-(z - center).powi(2) / (2.0 * width * width)).exp()
            }
            Self::Custom { dz, .. } => dz(t, z),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        !matches!(self, Self::Custom { .. })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Constant(c) if *c == 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct CauchySpec {
    /// Spatial dimension; only 1 is supported.
    pub dim: usize,
    pub a: Profile,
    pub b: Profile,
    pub c: Profile,
    pub eta: Profile,
    pub rho: Profile,
    pub sigma: Profile,
    pub kappa: f64,
    pub big_k: f64,
    pub half_width: f64,
    pub mesh: usize,
    /// Initial profile `x(z)` (the time argument is ignored).
    pub initial: Profile,
    pub horizon: f64,
}

impl CauchySpec {
    /// Heat equation `a ≡ 1` with every lower-order term zero.
    pub fn heat(mesh: usize, half_width: f64, horizon: f64, initial: Profile) -> Self {
        Self {
            dim: 1,
            a: Profile::Constant(1.0),
            b: Profile::Constant(0.0),
            c: Profile::Constant(0.0),
            eta: Profile::Constant(0.0),
            rho: Profile::Constant(0.0),
            sigma: Profile::Constant(0.0),
            kappa: 0.5,
            big_k: 3.0,
            half_width,
            mesh,
            initial,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::InvalidInput(format!("only d = 1 is supported (got d = {})", self.dim)));
        }
        if self.mesh < 3 {
            return Err(Error::InvalidInput(format!("mesh needs at least 3 interior nodes (got {})", self.mesh)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidInput(format!("kappa must lie in (0, 1) (got {})", self.kappa)));
        }
        if !(self.big_k > 1.0) || !self.big_k.is_finite() {
            return Err(Error::InvalidInput(format!("K must be finite and above 1 (got {})", self.big_k)));
        }
        if !(self.half_width > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidInput("half-width and horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.mesh + 1) as f64
    }

    /// Interior nodes `z_i = −L + (i + 1)·h`.
    pub fn nodes(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.mesh).map(|i| -self.half_width + (i + 1) as f64 * h).collect()
    }

    fn time_invariant(&self) -> bool {
        [&self.a, &self.b, &self.c, &self.eta, &self.rho, &self.sigma]
            .iter()
            .all(|p| p.is_time_invariant())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperparabolicReport {
    pub min_2a: f64,
    pub max_2a: f64,
    /// Largest sampled absolute value of any coefficient.
    pub max_coefficient: f64,
    /// `κ ≤ 2a ≤ K` on all samples.
    pub passed: bool,
    /// All coefficients bounded by `K` on the samples.
    pub bounded: bool,
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Samples `κ ≤ 2a ≤ K` on a `samples × samples` grid of `[0, T] × [−L, L]`.
pub fn check_superparabolic(spec: &CauchySpec, samples: usize) -> SuperparabolicReport {
    let samples = samples.max(1);
    let mut min_2a = f64::INFINITY;
    let mut max_2a = f64::NEG_INFINITY;
    let mut max_coefficient: f64 = 0.0;
    for t in linspace(0.0, spec.horizon, samples) {
        for z in linspace(-spec.half_width, spec.half_width, samples) {
            let a2 = 2.0 * spec.a.value(t, z);
            min_2a = min_2a.min(a2);
            max_2a = max_2a.max(a2);
            for p in [&spec.a, &spec.b, &spec.c, &spec.eta, &spec.rho, &spec.sigma] {
                max_coefficient = max_coefficient.max(p.value(t, z).abs());
            }
        }
    }
    SuperparabolicReport {
        min_2a,
        max_2a,
        max_coefficient,
        passed: spec.kappa <= min_2a && max_2a <= spec.big_k,
        bounded: max_coefficient <= spec.big_k,
    }
}

/// Finite-difference matrix of `A(t)` (flux form, centered first-order term).
pub fn operator_matrix(spec: &CauchySpec, t: f64) -> DMatrix<f64> {
    let n = spec.mesh;
    let h = spec.spacing();
    let z = spec.nodes();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let a_minus = spec.a.value(t, z[i] - 0.5 * h);
        let a_plus = spec.a.value(t, z[i] + 0.5 * h);
        let b = spec.b.value(t, z[i]);
        m[(i, i)] = (a_minus + a_plus) / (h * h) - spec.c.value(t, z[i]);
        if i > 0 {
            m[(i, i - 1)] = -a_minus / (h * h) + b / (2.0 * h);
        }
        if i + 1 < n {
            m[(i, i + 1)] = -a_plus / (h * h) - b / (2.0 * h);
        }
    }
    m
}

/// Direct discretization of `A*φ = −∂_z(a∂_zφ) + b∂_zφ − (c − ∂_z b)φ`.
pub fn analytic_adjoint_matrix(spec: &CauchySpec, t: f64) -> DMatrix<f64> {
    let n = spec.mesh;
    let h = spec.spacing();
    let z = spec.nodes();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let a_minus = spec.a.value(t, z[i] - 0.5 * h);
        let a_plus = spec.a.value(t, z[i] + 0.5 * h);
        let b = spec.b.value(t, z[i]);
        m[(i, i)] = (a_minus + a_plus) / (h * h) - spec.c.value(t, z[i]) + spec.b.dz(t, z[i]);
        if i > 0 {
            m[(i, i - 1)] = -a_minus / (h * h) - b / (2.0 * h);
        }
        if i + 1 < n {
            m[(i, i + 1)] = -a_plus / (h * h) + b / (2.0 * h);
        }
    }
    m
}

fn diagonal(spec: &CauchySpec, profile: &Profile, t: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        spec.mesh,
        spec.nodes().iter().map(|&z| profile.value(t, z)),
    ))
}

/// The assembled finite-dimensional problem.
#[derive(Debug, Clone)]
pub struct CauchyDiscretization {
    pub triple: DiscreteTriple,
    pub operator: OperatorProcess,
    pub lq: LqCoeffs,
    pub initial: DVector<f64>,
    pub nodes: Vec<f64>,
    pub spacing: f64,
}

/// Coercivity constants certified for the assembled operator:
/// `α = κ/4`, `λ = κ/4 + K + K²/κ`.
pub fn coercivity_constants(spec: &CauchySpec) -> (f64, f64) {
    let (kappa, k) = (spec.kappa, spec.big_k);
    (kappa / 4.0, kappa / 4.0 + k + k * k / kappa)
}

pub fn discretize(spec: &CauchySpec, grid: &TimeGrid) -> Result<CauchyDiscretization> {
    spec.validate()?;
    let report = check_superparabolic(spec, 64);
    if !report.passed {
        return Err(Error::Validation(format!(
            "super-parabolic condition fails: 2a ranges over [{:.6}, {:.6}], required [{}, {}]",
            report.min_2a, report.max_2a, spec.kappa, spec.big_k
        )));
    }
    let n = spec.mesh;
    let h = spec.spacing();
    let gram_h = DMatrix::identity(n, n) * h;
    let gram_v = &gram_h + dirichlet_stiffness(n) / h;
    let triple = DiscreteTriple::new(gram_h.clone(), gram_v)?;
    let times: Vec<f64> = if spec.time_invariant() {
        vec![0.0]
    } else {
        grid.nodes().collect()
    };
    let values: Vec<DMatrix<f64>> = times.iter().map(|&t| operator_matrix(spec, t)).collect();
    let (alpha, lambda) = coercivity_constants(spec);
    let bound = values.iter().map(|a| triple.operator_norm(a)).fold(0.0, f64::max) * (1.0 + 1e-9) + 1e-12;
    let operator = OperatorProcess::new(&triple, values, alpha, lambda, bound)?;
    let table = |p: &Profile| -> NodeTable<DMatrix<f64>> {
        if times.len() == 1 {
            NodeTable::constant(diagonal(spec, p, 0.0))
        } else {
            NodeTable::per_node(times.iter().map(|&t| diagonal(spec, p, t)).collect()).expect("non-empty grid")
        }
    };
    let identity = NodeTable::constant(DMatrix::identity(n, n));
    let lq = LqCoeffs {
        b1: NodeTable::constant(DMatrix::zeros(n, n)),
        b2: table(&spec.eta),
        c: identity.clone(),
        d1: table(&spec.rho),
        d2: table(&spec.sigma),
        f: identity,
        g1: NodeTable::constant(gram_h.clone()),
        g2: NodeTable::constant(gram_h.clone()),
        n_cost: NodeTable::constant(gram_h.clone()),
        phi1: gram_h.clone(),
        phi2: gram_h,
        positivity: h,
    };
    let report = lq.validate();
    if !report.passed {
        return Err(Error::Validation(report.messages.join("; ")));
    }
    let nodes = spec.nodes();
    let initial = DVector::from_iterator(n, nodes.iter().map(|&z| spec.initial.value(0.0, z)));
    Ok(CauchyDiscretization {
        triple,
        operator,
        lq,
        initial,
        nodes,
        spacing: h,
    })
}

impl CauchyDiscretization {
    pub fn lq_problem(&self, grid: TimeGrid, particles: usize, seed: u64) -> Result<LqProblem> {
        LqProblem::new(
            self.triple.clone(),
            self.operator.clone(),
            self.lq.clone(),
            self.initial.clone(),
            grid,
            particles,
            seed,
        )
    }

    /// The uncontrolled state equation `dy = [−Ay + η𝔼y]dt + [ρy + σ𝔼y]dW`.
    pub fn uncontrolled(&self) -> Result<ForwardProblem> {
        let n = self.initial.len();
        let b2 = self.lq.b2.at(0).clone();
        let drift = MeanFieldMap::affine(DMatrix::zeros(n, n), b2, DVector::zeros(n))?;
        let diffusion = MeanFieldMap::affine(self.lq.d1.at(0).clone(), self.lq.d2.at(0).clone(), DVector::zeros(n))?;
        ForwardProblem::new(
            self.triple.clone(),
            self.operator.clone(),
            drift,
            diffusion,
            MeanFieldForm::EnsembleMean,
            self.initial.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointCheckReport {
    /// Largest max-norm discrepancy over the smooth Dirichlet test modes.
    pub discrepancy: f64,
    /// Largest entry-wise gap between the two matrices.
    pub matrix_gap: f64,
    /// Largest gap between each multiplication operator and its adjoint.
    pub multiplication_gap: f64,
    pub spacing: f64,
}

/// Compares `adjoint_in_h` of the assembled operator against the direct
/// discretization of the analytic adjoint, applied to the first three
/// Dirichlet modes `sin(jπ(z + L)/(2L))`.
pub fn analytic_adjoint_check(spec: &CauchySpec, grid: &TimeGrid) -> Result<AdjointCheckReport> {
    let disc = discretize(spec, grid)?;
    let mut discrepancy: f64 = 0.0;
    let mut matrix_gap: f64 = 0.0;
    let mut multiplication_gap: f64 = 0.0;
    let times: Vec<f64> = if disc.operator.is_constant() { vec![0.0] } else { grid.nodes().collect() };
    for (k, &t) in times.iter().enumerate() {
        let adjoint = disc.triple.adjoint_in_h(disc.operator.at(k))?;
        let analytic = analytic_adjoint_matrix(spec, t);
        matrix_gap = matrix_gap.max((&adjoint - &analytic).amax());
        for j in 1..=3 {
            let mode = DVector::from_iterator(
                spec.mesh,
                disc.nodes.iter().map(|&z| {
                    (j as f64 * std::f64::consts::PI * (z + spec.half_width) / (2.0 * spec.half_width)).sin()
                }),
            );
            discrepancy = discrepancy.max((&adjoint * &mode - &analytic * &mode).amax());
        }
        for table in [&disc.lq.b2, &disc.lq.d1, &disc.lq.d2] {
            let m = table.at(k);
            multiplication_gap = multiplication_gap.max((disc.triple.adjoint_in_h(m)? - m).amax());
        }
    }
    Ok(AdjointCheckReport {
        discrepancy,
        matrix_gap,
        multiplication_gap,
        spacing: disc.spacing,
    })
}

#[derive(Debug, Clone)]
pub struct CauchySolution {
    pub discretization: CauchyDiscretization,
    pub problem: LqProblem,
    pub solution: LqSolution,
    /// `J(0)` on the same noise.
    pub uncontrolled_cost: f64,
    /// Ensemble-`L²(H)` size of `ū + ½(p̄ + q̄)`; for deterministic controls
    /// the adjoint is averaged over paths first.
    pub dual_identity: f64,
}

impl CauchySolution {
    /// Ensemble-mean control per step.
    pub fn mean_control(&self) -> Vec<DVector<f64>> {
        let control = &self.solution.control;
        let m = self.problem.particles();
        (0..control.steps())
            .map(|k| crate::linalg::column_mean(&control.values_at(k, m)))
            .collect()
    }
}

pub fn solve_cauchy(
    spec: &CauchySpec,
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
    options: FixedPointOptions,
) -> Result<CauchySolution> {
    let disc = discretize(spec, grid)?;
    let problem = disc.lq_problem(*grid, particles, seed)?;
    let solution = solve_fixed_point(&problem, options, None)?;
    let uncontrolled_cost = problem.cost_of(&problem.control_problem().zero_control(options.deterministic))?;
    let dt = grid.dt();
    let per_step: Vec<f64> = (0..grid.steps())
        .map(|k| {
            let gap = if solution.control.is_deterministic() {
                let u = solution.control.value(k, 0);
                let pq = (solution.adjoint.p_mean(k) + solution.adjoint.q_mean(k)) * 0.5;
                DMatrix::from_columns(&[u + pq])
            } else {
                solution.control.values_at(k, particles) + (&solution.adjoint.p[k] + &solution.adjoint.q[k]) * 0.5
            };
            dt * ensemble_l2(&gap, &disc.triple).powi(2)
        })
        .collect();
    let dual_identity = pairwise_sum(&per_step).sqrt();
    Ok(CauchySolution {
        discretization: disc,
        problem,
        solution,
        uncontrolled_cost,
        dual_identity,
    })
}

/// Deterministic uncontrolled solve on one path (no noise enters when
/// `ρ = σ = 0`), returning the state at every node.
pub fn solve_uncontrolled(spec: &CauchySpec, grid: &TimeGrid) -> Result<Vec<DVector<f64>>> {
    let disc = discretize(spec, grid)?;
    let problem = disc.uncontrolled()?;
    let noise = crate::forward::Noise::from_increments(0, DMatrix::zeros(1, grid.steps()));
    let ens = simulate_with_noise(&problem, grid, noise, None::<&ControlProcess>)?;
    Ok((0..=grid.steps()).map(|k| ens.particle_state(k, 0)).collect())
}
