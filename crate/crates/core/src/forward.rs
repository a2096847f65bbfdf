//! Interacting-particle semi-implicit Euler–Maruyama solver for forward
//! mean-field equations.
//!
//! Per step and particle the scheme solves
//! `(I + dt·A_k) X_{k+1} = X_k + dt·B_k + ΔW_k·Σ_k`, with the mean-field
//! argument realized either as an average over the other particles
//! ([`MeanFieldForm::IndependentCopy`]) or as the ensemble mean
//! ([`MeanFieldForm::EnsembleMean`]).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coeffs::{ControlCoefficients, LqCoeffs, MeanFieldMap, Node};
use crate::error::check_dim;
use crate::exec::{map_indexed, try_map_indexed};
use crate::linalg::{column_mean, pairwise_mean, vector_mean};
use crate::triple::{DiscreteTriple, OperatorProcess, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanFieldForm {
    /// `B^i = (1/M) Σ_j b(t, X^j, X^i)`, self-term included.
    IndependentCopy,
    /// `B^i = b(t, X̄, X^i)` with the ensemble mean `X̄`.
    #[default]
    EnsembleMean,
}

/// A forward mean-field equation. When `controlled` is set and a control is
/// passed to [`simulate`], its `h, g` replace `drift` and `diffusion`.
#[derive(Clone)]
pub struct ForwardProblem {
    pub triple: DiscreteTriple,
    pub operator: OperatorProcess,
    pub drift: MeanFieldMap,
    pub diffusion: MeanFieldMap,
    pub form: MeanFieldForm,
    pub initial: DVector<f64>,
    pub controlled: Option<Arc<dyn ControlCoefficients>>,
}

impl std::fmt::Debug for ForwardProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardProblem")
            .field("dim", &self.triple.dim())
            .field("form", &self.form)
            .field("initial", &self.initial)
            .field("controlled", &self.controlled.is_some())
            .finish()
    }
}

impl ForwardProblem {
    pub fn new(
        triple: DiscreteTriple,
        operator: OperatorProcess,
        drift: MeanFieldMap,
        diffusion: MeanFieldMap,
        form: MeanFieldForm,
        initial: DVector<f64>,
    ) -> Result<Self> {
        let problem = Self {
            triple,
            operator,
            drift,
            diffusion,
            form,
            initial,
            controlled: None,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Controlled problem in ensemble-mean form; the drift and diffusion
    /// fields are unused placeholders.
    pub fn controlled(
        triple: DiscreteTriple,
        operator: OperatorProcess,
        coeffs: Arc<dyn ControlCoefficients>,
        initial: DVector<f64>,
    ) -> Result<Self> {
        let n = triple.dim();
        let problem = Self {
            triple,
            operator,
            drift: MeanFieldMap::zero(n),
            diffusion: MeanFieldMap::zero(n),
            form: MeanFieldForm::EnsembleMean,
            initial,
            controlled: Some(coeffs),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn dim(&self) -> usize {
        self.triple.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.triple.dim();
        check_dim("operator dimension", n, self.operator.dim())?;
        check_dim("drift dimension", n, self.drift.dim())?;
        check_dim("diffusion dimension", n, self.diffusion.dim())?;
        check_dim("initial state", n, self.initial.len())?;
        if self.initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("initial state has non-finite entries".into()));
        }
        if let Some(c) = &self.controlled {
            check_dim("control coefficient state dimension", n, c.state_dim())?;
            if self.form != MeanFieldForm::EnsembleMean {
                return Err(Error::InvalidInput(
                    "controlled problems use the ensemble-mean form".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Brownian increments of all particles, generated per particle from the
/// master seed on the particle's own ChaCha stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    seed: u64,
    /// `M × N`, column `k` holds the increments over step `k`.
    increments: DMatrix<f64>,
    /// `M × (N + 1)` cumulative sums, `W(0) = 0`.
    brownian: DMatrix<f64>,
}

impl Noise {
    pub fn generate(grid: &TimeGrid, particles: usize, seed: u64) -> Result<Self> {
        if particles == 0 {
            return Err(Error::InvalidInput("at least one particle is required".into()));
        }
        let steps = grid.steps();
        let sd = grid.dt().sqrt();
        let rows = map_indexed(particles, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..steps)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>()
        });
        let increments = DMatrix::from_fn(particles, steps, |i, k| rows[i][k]);
        Ok(Self::from_increments(seed, increments))
    }

    /// Wraps explicit increments (`M × N`).
    pub fn from_increments(seed: u64, increments: DMatrix<f64>) -> Self {
        let (m, n) = increments.shape();
        let mut brownian = DMatrix::zeros(m, n + 1);
        for i in 0..m {
            for k in 0..n {
                brownian[(i, k + 1)] = brownian[(i, k)] + increments[(i, k)];
            }
        }
        Self {
            seed,
            increments,
            brownian,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particles(&self) -> usize {
        self.increments.nrows()
    }

    pub fn steps(&self) -> usize {
        self.increments.ncols()
    }

    pub fn increment(&self, k: usize, i: usize) -> f64 {
        self.increments[(i, k)]
    }

    pub fn brownian(&self, k: usize, i: usize) -> f64 {
        self.brownian[(i, k)]
    }

    /// Increments of all particles over step `k`.
    pub fn increments_at(&self, k: usize) -> &[f64] {
        let m = self.particles();
        &self.increments.as_slice()[k * m..(k + 1) * m]
    }

    /// Brownian values of all particles at node `k`.
    pub fn brownian_at(&self, k: usize) -> &[f64] {
        let m = self.particles();
        &self.brownian.as_slice()[k * m..(k + 1) * m]
    }

    /// Noise with particle `i` driven by the old particle `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim("permutation length", self.particles(), perm.len())?;
        let increments = DMatrix::from_fn(self.particles(), self.steps(), |i, k| self.increments[(perm[i], k)]);
        Ok(Self::from_increments(self.seed, increments))
    }
}

/// `M` sample paths of the state on a grid with their driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    grid: TimeGrid,
    noise: Noise,
    /// One `n × M` matrix per node.
    states: Vec<DMatrix<f64>>,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    pub fn seed(&self) -> u64 {
        self.noise.seed
    }

    pub fn particles(&self) -> usize {
        self.noise.particles()
    }

    pub fn dim(&self) -> usize {
        self.states[0].nrows()
    }

    /// States of all particles at node `k` (`n × M`).
    pub fn state(&self, k: usize) -> &DMatrix<f64> {
        &self.states[k]
    }

    pub fn states(&self) -> &[DMatrix<f64>] {
        &self.states
    }

    pub fn particle_state(&self, k: usize, i: usize) -> DVector<f64> {
        self.states[k].column(i).into_owned()
    }

    pub fn path(&self, i: usize) -> Vec<DVector<f64>> {
        (0..self.states.len()).map(|k| self.particle_state(k, i)).collect()
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.states.last().expect("ensemble has at least one node")
    }

    pub fn mean(&self, k: usize) -> DVector<f64> {
        column_mean(&self.states[k])
    }
}

/// Arithmetic mean over particles at each node.
pub fn ensemble_mean(ens: &ParticleEnsemble) -> Vec<DVector<f64>> {
    (0..ens.states.len()).map(|k| ens.mean(k)).collect()
}

/// Per-component ensemble variance at each node.
pub fn ensemble_variance(ens: &ParticleEnsemble) -> Vec<DVector<f64>> {
    ens.states
        .iter()
        .map(|x| {
            let mean = column_mean(x);
            DVector::from_fn(x.nrows(), |r, _| {
                let dev: Vec<f64> = x.row(r).iter().map(|v| (v - mean[r]).powi(2)).collect();
                pairwise_mean(&dev)
            })
        })
        .collect()
}

/// Closed convex control set `𝒰 ⊂ ℝᵐ`, given by its projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ControlSet {
    #[default]
    Unconstrained,
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
}

impl ControlSet {
    pub fn uniform_box(m: usize, lower: f64, upper: f64) -> Result<Self> {
        if !(lower <= upper) {
            return Err(Error::InvalidInput(format!("empty box [{lower}, {upper}]")));
        }
        Ok(Self::Box {
            lower: DVector::from_element(m, lower),
            upper: DVector::from_element(m, upper),
        })
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Unconstrained => u.clone(),
            Self::Box { lower, upper } => DVector::from_fn(u.len(), |i, _| u[i].clamp(lower[i], upper[i])),
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            Self::Unconstrained => true,
            Self::Box { lower, upper } => u.iter().zip(lower.iter().zip(upper)).all(|(v, (l, h))| l <= v && v <= h),
        }
    }

    /// Draws a point of the set (a uniform point for boxes, a standard
    /// normal vector otherwise).
    pub fn sample(&self, m: usize, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            Self::Unconstrained => DVector::from_fn(m, |_, _| rng.sample(StandardNormal)),
            Self::Box { lower, upper } => {
                DVector::from_fn(m, |i, _| lower[i] + (upper[i] - lower[i]) * rng.random::<f64>())
            }
        }
    }
}

/// Control values on the grid: per path (adapted) or one vector per step.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlProcess {
    /// One `m × M` matrix per step.
    Adapted(Vec<DMatrix<f64>>),
    /// One `m`-vector per step, shared by all paths.
    Deterministic(Vec<DVector<f64>>),
}

impl ControlProcess {
    pub fn zeros_deterministic(m: usize, steps: usize) -> Self {
        Self::Deterministic(vec![DVector::zeros(m); steps])
    }

    pub fn zeros_adapted(m: usize, steps: usize, particles: usize) -> Self {
        Self::Adapted(vec![DMatrix::zeros(m, particles); steps])
    }

    pub fn deterministic_from_fn(grid: &TimeGrid, f: impl Fn(usize, f64) -> DVector<f64>) -> Self {
        Self::Deterministic((0..grid.steps()).map(|k| f(k, grid.node(k))).collect())
    }

    /// Standard normal entries from `seed`; adapted when `particles` is set.
    pub fn gaussian(m: usize, steps: usize, particles: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |cols: usize| DMatrix::from_fn(m, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        match particles {
            None => Self::Deterministic((0..steps).map(|_| draw(1).column(0).into_owned()).collect()),
            Some(p) => Self::Adapted((0..steps).map(|_| draw(p)).collect()),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Self::Deterministic(_))
    }

    pub fn steps(&self) -> usize {
        match self {
            Self::Adapted(v) => v.len(),
            Self::Deterministic(v) => v.len(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Self::Adapted(v) => v.first().map_or(0, |m| m.nrows()),
            Self::Deterministic(v) => v.first().map_or(0, |u| u.len()),
        }
    }

    /// Number of paths for adapted controls.
    pub fn particles(&self) -> Option<usize> {
        match self {
            Self::Adapted(v) => v.first().map(|m| m.ncols()),
            Self::Deterministic(_) => None,
        }
    }

    pub fn value(&self, k: usize, i: usize) -> DVector<f64> {
        match self {
            Self::Adapted(v) => v[k].column(i).into_owned(),
            Self::Deterministic(v) => v[k].clone(),
        }
    }

    /// Values of all `particles` paths at step `k` (`m × M`).
    pub fn values_at(&self, k: usize, particles: usize) -> DMatrix<f64> {
        match self {
            Self::Adapted(v) => v[k].clone(),
            Self::Deterministic(v) => DMatrix::from_fn(v[k].len(), particles, |r, _| v[k][r]),
        }
    }

    pub fn to_adapted(&self, particles: usize) -> Self {
        Self::Adapted((0..self.steps()).map(|k| self.values_at(k, particles)).collect())
    }

    pub fn check(&self, grid: &TimeGrid, particles: usize, m: usize) -> Result<()> {
        check_dim("control steps", grid.steps(), self.steps())?;
        match self {
            Self::Adapted(v) => {
                for u in v {
                    check_dim("control dimension", m, u.nrows())?;
                    check_dim("control paths", particles, u.ncols())?;
                }
            }
            Self::Deterministic(v) => {
                for u in v {
                    check_dim("control dimension", m, u.len())?;
                }
            }
        }
        if !self.all_finite() {
            return Err(Error::InvalidInput("control has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Self::Adapted(v) => v.iter().all(|u| u.iter().all(|x| x.is_finite())),
            Self::Deterministic(v) => v.iter().all(|u| u.iter().all(|x| x.is_finite())),
        }
    }

    /// `a·self + b·other`; both must have the same mode and shape.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        check_dim("control steps", self.steps(), other.steps())?;
        match (self, other) {
            (Self::Adapted(x), Self::Adapted(y)) => {
                let mut out = Vec::with_capacity(x.len());
                for (u, v) in x.iter().zip(y) {
                    if u.shape() != v.shape() {
                        return Err(Error::InvalidInput("control shapes differ".into()));
                    }
                    out.push(u * a + v * b);
                }
                Ok(Self::Adapted(out))
            }
            (Self::Deterministic(x), Self::Deterministic(y)) => {
                let mut out = Vec::with_capacity(x.len());
                for (u, v) in x.iter().zip(y) {
                    check_dim("control dimension", u.len(), v.len())?;
                    out.push(u * a + v * b);
                }
                Ok(Self::Deterministic(out))
            }
            _ => Err(Error::InvalidInput(
                "cannot combine adapted and deterministic controls".into(),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Self {
        match self {
            Self::Adapted(v) => Self::Adapted(
                v.iter()
                    .map(|u| {
                        let cols: Vec<DVector<f64>> = (0..u.ncols()).map(|i| f(&u.column(i).into_owned())).collect();
                        DMatrix::from_columns(&cols)
                    })
                    .collect(),
            ),
            Self::Deterministic(v) => Self::Deterministic(v.iter().map(&f).collect()),
        }
    }

    pub fn project(&self, set: &ControlSet) -> Self {
        self.map(|u| set.project(u))
    }

    pub fn is_admissible(&self, set: &ControlSet) -> bool {
        match self {
            Self::Adapted(v) => v
                .iter()
                .all(|u| (0..u.ncols()).all(|i| set.contains(&u.column(i).into_owned()))),
            Self::Deterministic(v) => v.iter().all(|u| set.contains(u)),
        }
    }

    /// `𝔼∫⟨u, v⟩ dt` with the rectangle rule and ensemble averages.
    pub fn pairing(&self, other: &Self, dt: f64) -> Result<f64> {
        check_dim("control steps", self.steps(), other.steps())?;
        let particles = self.particles().or(other.particles()).unwrap_or(1);
        let mut per_step = Vec::with_capacity(self.steps());
        for k in 0..self.steps() {
            let u = self.values_at(k, particles);
            let v = other.values_at(k, particles);
            if u.shape() != v.shape() {
                return Err(Error::InvalidInput("control shapes differ".into()));
            }
            let dots: Vec<f64> = (0..particles).map(|i| u.column(i).dot(&v.column(i))).collect();
            per_step.push(pairwise_mean(&dots));
        }
        Ok(dt * crate::linalg::pairwise_sum(&per_step))
    }

    /// `𝔼∫‖u‖² dt`.
    pub fn norm_sq(&self, dt: f64) -> f64 {
        self.pairing(self, dt).expect("a control pairs with itself")
    }
}

fn factorize(problem: &ForwardProblem, grid: &TimeGrid) -> Result<Vec<LU<f64, Dyn, Dyn>>> {
    problem.operator.check_grid(grid)?;
    let n = problem.dim();
    let count = if problem.operator.is_constant() { 1 } else { grid.steps() };
    (0..count)
        .map(|k| {
            let m = DMatrix::identity(n, n) + problem.operator.at(k) * grid.dt();
            let lu = m.lu();
            if !lu.is_invertible() {
                return Err(Error::SingularOperator { node: k });
            }
            Ok(lu)
        })
        .collect()
}

/// Simulates `particles` paths with fresh noise derived from `seed`.
pub fn simulate(
    problem: &ForwardProblem,
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
    control: Option<&ControlProcess>,
) -> Result<ParticleEnsemble> {
    let noise = Noise::generate(grid, particles, seed)?;
    simulate_with_noise(problem, grid, noise, control)
}

/// Simulates on the given noise (common random numbers).
pub fn simulate_with_noise(
    problem: &ForwardProblem,
    grid: &TimeGrid,
    noise: Noise,
    control: Option<&ControlProcess>,
) -> Result<ParticleEnsemble> {
    problem.validate()?;
    check_dim("noise steps", grid.steps(), noise.steps())?;
    let particles = noise.particles();
    let coeffs = match (control, &problem.controlled) {
        (Some(u), Some(c)) => {
            u.check(grid, particles, c.control_dim())?;
            Some((u, c.as_ref()))
        }
        (Some(_), None) => {
            return Err(Error::InvalidInput(
                "a control was supplied to an uncontrolled problem".into(),
            ))
        }
        (None, _) => None,
    };
    let n = problem.dim();
    let dt = grid.dt();
    let solvers = factorize(problem, grid)?;
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(DMatrix::from_fn(n, particles, |r, _| problem.initial[r]));
    for k in 0..grid.steps() {
        let xk = &states[k];
        let t = grid.node(k);
        let mean = column_mean(xk);
        let lu = &solvers[k.min(solvers.len() - 1)];
        let columns: Vec<DVector<f64>> = try_map_indexed(particles, |i| {
            let x = xk.column(i).into_owned();
            let w = noise.brownian(k, i);
            let (b, s) = match coeffs {
                Some((u, c)) => {
                    let ui = u.value(k, i);
                    let node = Node { k, t };
                    (c.drift(node, &x, &mean, &ui), c.diffusion(node, &x, &mean, &ui))
                }
                None => (
                    mean_field_term(&problem.drift, problem.form, t, w, xk, &mean, &x),
                    mean_field_term(&problem.diffusion, problem.form, t, w, xk, &mean, &x),
                ),
            };
            let rhs = x + b * dt + s * noise.increment(k, i);
            let next = lu.solve(&rhs).ok_or(Error::SingularOperator { node: k })?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { step: k + 1, particle: i });
            }
            Ok(next)
        })?;
        states.push(DMatrix::from_columns(&columns));
    }
    Ok(ParticleEnsemble {
        grid: *grid,
        noise,
        states,
    })
}

fn mean_field_term(
    map: &MeanFieldMap,
    form: MeanFieldForm,
    t: f64,
    w: f64,
    all: &DMatrix<f64>,
    mean: &DVector<f64>,
    x: &DVector<f64>,
) -> DVector<f64> {
    match form {
        MeanFieldForm::EnsembleMean => map.eval(t, w, mean, x),
        MeanFieldForm::IndependentCopy => {
            if let Some(affine) = map.as_affine() {
                return affine.apply(mean, x);
            }
            let terms: Vec<DVector<f64>> = (0..all.ncols())
                .map(|j| map.eval(t, w, &all.column(j).into_owned(), x))
                .collect();
            vector_mean(&terms)
        }
    }
}

/// Mean recursion `(I + dt·A)m_{k+1} = m_k + dt·(S + M)m_k + dt·c` of a
/// problem with affine drift `S x + M x' + c` (either form).
pub fn moment_oracle(problem: &ForwardProblem, grid: &TimeGrid) -> Result<Vec<DVector<f64>>> {
    let affine = problem
        .drift
        .as_affine()
        .ok_or_else(|| Error::InvalidInput("moment oracle needs an affine drift".into()))?;
    if problem.drift.is_random() {
        return Err(Error::InvalidInput("moment oracle needs a non-random drift".into()));
    }
    let solvers = factorize(problem, grid)?;
    let slope = &affine.on_state + &affine.on_mean;
    let dt = grid.dt();
    let mut out = vec![problem.initial.clone()];
    for k in 0..grid.steps() {
        let m = &out[k];
        let rhs = m + (&slope * m + &affine.offset) * dt;
        let lu = &solvers[k.min(solvers.len() - 1)];
        out.push(lu.solve(&rhs).ok_or(Error::SingularOperator { node: k })?);
    }
    Ok(out)
}

/// Mean recursion for linear-quadratic dynamics under a deterministic
/// control: `(I + dt·A)m_{k+1} = m_k + dt·(B1 + B2)m_k + dt·C·u_k`.
pub fn lq_moment_oracle(
    operator: &OperatorProcess,
    lq: &LqCoeffs,
    initial: &DVector<f64>,
    grid: &TimeGrid,
    control: &ControlProcess,
) -> Result<Vec<DVector<f64>>> {
    let ControlProcess::Deterministic(u) = control else {
        return Err(Error::InvalidInput("moment oracle needs a deterministic control".into()));
    };
    check_dim("control steps", grid.steps(), u.len())?;
    let n = initial.len();
    let dt = grid.dt();
    let mut out = vec![initial.clone()];
    for k in 0..grid.steps() {
        let m = &out[k];
        let drift = (lq.b1.at(k) + lq.b2.at(k)) * m + lq.c.at(k) * &u[k];
        let lhs = DMatrix::identity(n, n) + operator.at(k) * dt;
        let next = lhs.lu().solve(&(m + drift * dt)).ok_or(Error::SingularOperator { node: k })?;
        out.push(next);
    }
    Ok(out)
}
