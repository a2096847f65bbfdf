//! Coefficient models and sampled validators for their standing assumptions.
//!
//! Gradients and Jacobians are taken with respect to coordinates: for a
//! scalar `l`, `l_x` is `∂l/∂x ∈ ℝⁿ`; its `H`-Riesz representer is
//! `G_H⁻¹ l_x` (see [`DiscreteTriple::h_riesz`]). Coefficients are
//! piecewise constant in time between grid nodes and receive the node
//! index alongside the time.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::check_dim;
use crate::linalg::{min_eigenvalue, relative_asymmetry};
use crate::triple::{DiscreteTriple, TimeGrid, PSD_SLACK};
use crate::{Error, Result};

/// A grid node: index and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub k: usize,
    pub t: f64,
}

impl Node {
    pub fn on(grid: &TimeGrid, k: usize) -> Self {
        Self { k, t: grid.node(k) }
    }
}

type FieldFn = dyn Fn(f64, f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// `b(t, x') + ... ` split into `on_state·x + on_mean·x' + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub on_state: DMatrix<f64>,
    pub on_mean: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, x_prime: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.on_state * x + &self.on_mean * x_prime + &self.offset
    }
}

/// A mean-field coefficient `(t, x', x) ↦ b(t, x', x) ∈ ℝⁿ`, where `x'`
/// stands for the independent copy (or the mean, depending on the form).
///
/// Random coefficients see the current Brownian value `w` of the particle's
/// own driving path.
#[derive(Clone)]
pub struct MeanFieldMap {
    dim: usize,
    f: Arc<FieldFn>,
    lipschitz: f64,
    random: bool,
    affine: Option<AffineMap>,
}

pub type MeanFieldDrift = MeanFieldMap;
pub type MeanFieldDiffusion = MeanFieldMap;

impl std::fmt::Debug for MeanFieldMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeanFieldMap")
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("random", &self.random)
            .field("affine", &self.affine.is_some())
            .finish()
    }
}

impl MeanFieldMap {
    pub fn new<F>(dim: usize, lipschitz: f64, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            f: Arc::new(move |t, _w, xp, x| f(t, xp, x)),
            lipschitz,
            random: false,
            affine: None,
        }
    }

    /// Coefficient depending on the particle's Brownian value `w = W(t)`.
    pub fn random<F>(dim: usize, lipschitz: f64, f: F) -> Self
    where
        F: Fn(f64, f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            f: Arc::new(f),
            lipschitz,
            random: true,
            affine: None,
        }
    }

    pub fn affine(on_state: DMatrix<f64>, on_mean: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let dim = offset.len();
        for (what, m) in [("affine on_state", &on_state), ("affine on_mean", &on_mean)] {
            check_dim(what, dim, m.nrows())?;
            check_dim(what, dim, m.ncols())?;
        }
        let lipschitz = spectral_norm(&on_state).max(spectral_norm(&on_mean));
        let map = AffineMap {
            on_state,
            on_mean,
            offset,
        };
        let captured = map.clone();
        Ok(Self {
            dim,
            f: Arc::new(move |_t, _w, xp, x| captured.apply(xp, x)),
            lipschitz,
            random: false,
            affine: Some(map),
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self::affine(DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim), DVector::zeros(dim))
            .expect("zero map has consistent dimensions")
    }

    pub fn constant(offset: DVector<f64>) -> Self {
        let n = offset.len();
        Self::affine(DMatrix::zeros(n, n), DMatrix::zeros(n, n), offset)
            .expect("constant map has consistent dimensions")
    }

    pub fn eval(&self, t: f64, w: f64, x_prime: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, w, x_prime, x)
    }

    /// `b(t, 0, 0)` (with `w = 0` for random coefficients).
    pub fn at_origin(&self, t: f64) -> DVector<f64> {
        let z = DVector::zeros(self.dim);
        self.eval(t, 0.0, &z, &z)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_random(&self) -> bool {
        self.random
    }

    pub fn as_affine(&self) -> Option<&AffineMap> {
        self.affine.as_ref()
    }

    /// `b + δ·e` with a constant vector `e`; affine structure is preserved.
    pub fn shifted(&self, shift: DVector<f64>) -> Self {
        let inner = self.f.clone();
        let s = shift.clone();
        Self {
            dim: self.dim,
            f: Arc::new(move |t, w, xp, x| inner(t, w, xp, x) + &s),
            lipschitz: self.lipschitz,
            random: self.random,
            affine: self.affine.as_ref().map(|a| AffineMap {
                on_state: a.on_state.clone(),
                on_mean: a.on_mean.clone(),
                offset: &a.offset + &shift,
            }),
        }
    }

    /// Replaces `b(t, 0, 0)` by `scale·b(t, 0, 0)`.
    pub fn with_scaled_origin(&self, scale: f64) -> Self {
        let inner = self.f.clone();
        let dim = self.dim;
        Self {
            dim,
            f: Arc::new(move |t, w, xp, x| {
                let z = DVector::zeros(dim);
                let origin = inner(t, w, &z, &z);
                inner(t, w, xp, x) + origin * (scale - 1.0)
            }),
            lipschitz: self.lipschitz,
            random: self.random,
            affine: self.affine.as_ref().map(|a| AffineMap {
                on_state: a.on_state.clone(),
                on_mean: a.on_mean.clone(),
                offset: &a.offset * scale,
            }),
        }
    }
}

type DriverFn = dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>
    + Send
    + Sync;

/// `f(t, y', z', y, z) = on_y_mean·y' + on_z_mean·z' + on_y·y + on_z·z + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDriver {
    pub on_y_mean: DMatrix<f64>,
    pub on_z_mean: DMatrix<f64>,
    pub on_y: DMatrix<f64>,
    pub on_z: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearDriver {
    pub fn apply(
        &self,
        y_mean: &DVector<f64>,
        z_mean: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        &self.on_y_mean * y_mean + &self.on_z_mean * z_mean + &self.on_y * y + &self.on_z * z + &self.offset
    }
}

/// Driver `f(t, y', z', y, z)` of a mean-field backward equation.
#[derive(Clone)]
pub struct BackwardDriver {
    dim: usize,
    f: Arc<DriverFn>,
    lipschitz: f64,
    linear: Option<LinearDriver>,
}

impl std::fmt::Debug for BackwardDriver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackwardDriver")
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("linear", &self.linear.is_some())
            .finish()
    }
}

impl BackwardDriver {
    pub fn new<F>(dim: usize, lipschitz: f64, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
    {
        Self {
            dim,
            f: Arc::new(f),
            lipschitz,
            linear: None,
        }
    }

    pub fn linear(driver: LinearDriver) -> Result<Self> {
        let dim = driver.offset.len();
        for (what, m) in [
            ("driver on_y_mean", &driver.on_y_mean),
            ("driver on_z_mean", &driver.on_z_mean),
            ("driver on_y", &driver.on_y),
            ("driver on_z", &driver.on_z),
        ] {
            check_dim(what, dim, m.nrows())?;
            check_dim(what, dim, m.ncols())?;
        }
        let lipschitz = [
            &driver.on_y_mean,
            &driver.on_z_mean,
            &driver.on_y,
            &driver.on_z,
        ]
        .iter()
        .map(|m| spectral_norm(m))
        .fold(0.0, f64::max);
        let captured = driver.clone();
        Ok(Self {
            dim,
            f: Arc::new(move |_t, ym, zm, y, z| captured.apply(ym, zm, y, z)),
            lipschitz,
            linear: Some(driver),
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DVector::zeros(dim))
    }

    pub fn constant(offset: DVector<f64>) -> Self {
        let n = offset.len();
        Self::linear(LinearDriver {
            on_y_mean: DMatrix::zeros(n, n),
            on_z_mean: DMatrix::zeros(n, n),
            on_y: DMatrix::zeros(n, n),
            on_z: DMatrix::zeros(n, n),
            offset,
        })
        .expect("constant driver has consistent dimensions")
    }

    pub fn eval(
        &self,
        t: f64,
        y_mean: &DVector<f64>,
        z_mean: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        (self.f)(t, y_mean, z_mean, y, z)
    }

    pub fn at_origin(&self, t: f64) -> DVector<f64> {
        let z = DVector::zeros(self.dim);
        self.eval(t, &z, &z, &z, &z)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn as_linear(&self) -> Option<&LinearDriver> {
        self.linear.as_ref()
    }

    /// `f + shift` with a constant vector.
    pub fn shifted(&self, shift: DVector<f64>) -> Self {
        let inner = self.f.clone();
        let s = shift.clone();
        Self {
            dim: self.dim,
            f: Arc::new(move |t, ym, zm, y, z| inner(t, ym, zm, y, z) + &s),
            lipschitz: self.lipschitz,
            linear: self.linear.as_ref().map(|l| LinearDriver {
                offset: &l.offset + &shift,
                ..l.clone()
            }),
        }
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.singular_values().max()
    }
}

/// Anything whose Lipschitz constant can be probed: a map of `arity`
/// vector arguments of dimension `dim`.
pub trait LipschitzProbe {
    fn arity(&self) -> usize;
    fn dim(&self) -> usize;
    fn probe(&self, t: f64, w: f64, args: &[DVector<f64>]) -> DVector<f64>;
}

impl LipschitzProbe for MeanFieldMap {
    fn arity(&self) -> usize {
        2
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn probe(&self, t: f64, w: f64, args: &[DVector<f64>]) -> DVector<f64> {
        self.eval(t, w, &args[0], &args[1])
    }
}

impl LipschitzProbe for BackwardDriver {
    fn arity(&self) -> usize {
        4
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn probe(&self, t: f64, _w: f64, args: &[DVector<f64>]) -> DVector<f64> {
        self.eval(t, &args[0], &args[1], &args[2], &args[3])
    }
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Largest sampled ratio `‖Δf‖_H / Σ_i ‖Δarg_i‖_H`.
///
/// Each probe draws a base point and a perturbation, then measures the
/// joint perturbation and each single-argument perturbation. Probe `j` only
/// depends on `(seed, j)`, so a larger probe count never lowers the result.
pub fn estimate_lipschitz(
    coeff: &dyn LipschitzProbe,
    triple: &DiscreteTriple,
    grid: &TimeGrid,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes < 2 {
        return Err(Error::InvalidInput("estimate_lipschitz needs at least 2 probes".into()));
    }
    check_dim("lipschitz probe dimension", triple.dim(), coeff.dim())?;
    let n = coeff.dim();
    let arity = coeff.arity();
    let h_norm = |v: &DVector<f64>| triple.h_norm_sq(v).max(0.0).sqrt();
    let mut best: f64 = 0.0;
    for j in 0..probes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let k = rng.random_range(0..=grid.steps());
        let t = grid.node(k);
        let w: f64 = rng.sample::<f64, _>(StandardNormal) * t.sqrt();
        let base: Vec<DVector<f64>> = (0..arity).map(|_| normal_vector(&mut rng, n)).collect();
        let delta: Vec<DVector<f64>> = (0..arity).map(|_| normal_vector(&mut rng, n)).collect();
        let f0 = coeff.probe(t, w, &base);
        if f0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "coefficient returned non-finite values at probe {j}"
            )));
        }
        // joint perturbation followed by one perturbation per argument
        for which in 0..=arity {
            let moved: Vec<DVector<f64>> = base
                .iter()
                .zip(&delta)
                .enumerate()
                .map(|(i, (b, d))| if which == arity || which == i { b + d } else { b.clone() })
                .collect();
            let denom: f64 = (0..arity)
                .filter(|&i| which == arity || which == i)
                .map(|i| h_norm(&delta[i]))
                .sum();
            let f1 = coeff.probe(t, w, &moved);
            if f1.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "coefficient returned non-finite values at probe {j}"
                )));
            }
            if denom > 0.0 {
                best = best.max(h_norm(&(f1 - &f0)) / denom);
            }
        }
    }
    Ok(best)
}

/// `m` entries per node, or one entry for a time-invariant coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable<T>(Vec<T>);

impl<T> NodeTable<T> {
    pub fn constant(value: T) -> Self {
        Self(vec![value])
    }

    pub fn per_node(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("node table needs at least one entry".into()));
        }
        Ok(Self(values))
    }

    pub fn at(&self, k: usize) -> &T {
        &self.0[k.min(self.0.len() - 1)]
    }

    pub fn entries(&self) -> &[T] {
        &self.0
    }

    pub fn is_constant(&self) -> bool {
        self.0.len() == 1
    }
}

impl<T> From<T> for NodeTable<T> {
    fn from(value: T) -> Self {
        Self::constant(value)
    }
}

/// Jacobians of a vector coefficient with respect to `(x, x', u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    pub x: DMatrix<f64>,
    pub x_mean: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

/// Gradients of a scalar coefficient with respect to `(x, x', u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub x: DVector<f64>,
    pub x_mean: DVector<f64>,
    pub u: DVector<f64>,
}

/// Coefficients `h, g, l, Φ` of the controlled mean-field system and their
/// Gâteaux derivatives. The second state argument is `𝔼X`.
pub trait ControlCoefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn drift(&self, node: Node, x: &DVector<f64>, x_mean: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn diffusion(&self, node: Node, x: &DVector<f64>, x_mean: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_cost(&self, node: Node, x: &DVector<f64>, x_mean: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>, x_mean: &DVector<f64>) -> f64;

    fn drift_jacobians(&self, node: Node, x: &DVector<f64>, x_mean: &DVector<f64>, u: &DVector<f64>) -> Jacobians;
    fn diffusion_jacobians(
        &self,
        node: Node,
        x: &DVector<f64>,
        x_mean: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Jacobians;
    fn running_cost_gradients(
        &self,
        node: Node,
        x: &DVector<f64>,
        x_mean: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Gradients;
    /// `(Φ_x, Φ_{x'})`.
    fn terminal_cost_gradients(&self, x: &DVector<f64>, x_mean: &DVector<f64>) -> (DVector<f64>, DVector<f64>);

    /// The underlying linear-quadratic data, when there is one.
    fn as_lq(&self) -> Option<&LqCoeffs> {
        None
    }
}

type VecFn = dyn Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Jacobians + Send + Sync;
type ScalarFn = dyn Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Gradients + Send + Sync;
type TermFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync;
type TermGradFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>) + Send + Sync;

/// Closure-backed [`ControlCoefficients`]; every derivative is supplied by
/// the caller. Unset entries are identically zero.
#[derive(Clone)]
pub struct FnControlCoeffs {
    n: usize,
    m: usize,
    drift: Arc<VecFn>,
    drift_jac: Arc<JacFn>,
    diffusion: Arc<VecFn>,
    diffusion_jac: Arc<JacFn>,
    running: Arc<ScalarFn>,
    running_grad: Arc<GradFn>,
    terminal: Arc<TermFn>,
    terminal_grad: Arc<TermGradFn>,
}

impl FnControlCoeffs {
    pub fn zero(n: usize, m: usize) -> Self {
        let zero_jac = move |_: Node, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>| Jacobians {
            x: DMatrix::zeros(n, n),
            x_mean: DMatrix::zeros(n, n),
            u: DMatrix::zeros(n, m),
        };
        Self {
            n,
            m,
            drift: Arc::new(move |_, _, _, _| DVector::zeros(n)),
            drift_jac: Arc::new(zero_jac),
            diffusion: Arc::new(move |_, _, _, _| DVector::zeros(n)),
            diffusion_jac: Arc::new(zero_jac),
            running: Arc::new(|_, _, _, _| 0.0),
            running_grad: Arc::new(move |_, _, _, _| Gradients {
                x: DVector::zeros(n),
                x_mean: DVector::zeros(n),
                u: DVector::zeros(m),
            }),
            terminal: Arc::new(|_, _| 0.0),
            terminal_grad: Arc::new(move |_, _| (DVector::zeros(n), DVector::zeros(n))),
        }
    }

    pub fn with_drift<F, J>(mut self, value: F, jacobians: J) -> Self
    where
        F: Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Jacobians + Send + Sync + 'static,
    {
        self.drift = Arc::new(value);
        self.drift_jac = Arc::new(jacobians);
        self
    }

    pub fn with_diffusion<F, J>(mut self, value: F, jacobians: J) -> Self
    where
        F: Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Jacobians + Send + Sync + 'static,
    {
        self.diffusion = Arc::new(value);
        self.diffusion_jac = Arc::new(jacobians);
        self
    }

    pub fn with_running_cost<F, G>(mut self, value: F, gradients: G) -> Self
    where
        F: Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(Node, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Gradients + Send + Sync + 'static,
    {
        self.running = Arc::new(value);
        self.running_grad = Arc::new(gradients);
        self
    }

    pub fn with_terminal_cost<F, G>(mut self, value: F, gradients: G) -> Self
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>) + Send + Sync + 'static,
    {
        self.terminal = Arc::new(value);
        self.terminal_grad = Arc::new(gradients);
        self
    }
}

impl ControlCoefficients for FnControlCoeffs {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.drift)(node, x, xm, u)
    }
    fn diffusion(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.diffusion)(node, x, xm, u)
    }
    fn running_cost(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.running)(node, x, xm, u)
    }
    fn terminal_cost(&self, x: &DVector<f64>, xm: &DVector<f64>) -> f64 {
        (self.terminal)(x, xm)
    }
    fn drift_jacobians(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> Jacobians {
        (self.drift_jac)(node, x, xm, u)
    }
    fn diffusion_jacobians(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> Jacobians {
        (self.diffusion_jac)(node, x, xm, u)
    }
    fn running_cost_gradients(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> Gradients {
        (self.running_grad)(node, x, xm, u)
    }
    fn terminal_cost_gradients(&self, x: &DVector<f64>, xm: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.terminal_grad)(x, xm)
    }
}

/// Matrices of the linear-quadratic problem. Cost matrices are quadratic
/// forms in coordinates: `l = xᵀG₁x + x'ᵀG₂x' + uᵀNu`, `Φ = xᵀΦ₁x + x'ᵀΦ₂x'`.
/// To charge `(G x, x)_H` for an operator `G`, pass `G_H G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqCoeffs {
    pub b1: NodeTable<DMatrix<f64>>,
    pub b2: NodeTable<DMatrix<f64>>,
    pub c: NodeTable<DMatrix<f64>>,
    pub d1: NodeTable<DMatrix<f64>>,
    pub d2: NodeTable<DMatrix<f64>>,
    pub f: NodeTable<DMatrix<f64>>,
    pub g1: NodeTable<DMatrix<f64>>,
    pub g2: NodeTable<DMatrix<f64>>,
    pub n_cost: NodeTable<DMatrix<f64>>,
    pub phi1: DMatrix<f64>,
    pub phi2: DMatrix<f64>,
    /// Uniform positivity floor `k` with `N ≥ k·I`.
    pub positivity: f64,
}

impl LqCoeffs {
    /// All matrices zero except `N = I`, `k = 1`.
    pub fn zeros(n: usize, m: usize) -> Self {
        let z = |r: usize, c: usize| NodeTable::constant(DMatrix::zeros(r, c));
        Self {
            b1: z(n, n),
            b2: z(n, n),
            c: z(n, m),
            d1: z(n, n),
            d2: z(n, n),
            f: z(n, m),
            g1: z(n, n),
            g2: z(n, n),
            n_cost: NodeTable::constant(DMatrix::identity(m, m)),
            phi1: DMatrix::zeros(n, n),
            phi2: DMatrix::zeros(n, n),
            positivity: 1.0,
        }
    }

    /// Scalar problem (`n = m = 1`) from its eleven coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        b1: f64,
        b2: f64,
        c: f64,
        d1: f64,
        d2: f64,
        f: f64,
        g1: f64,
        g2: f64,
        n_cost: f64,
        phi1: f64,
        phi2: f64,
    ) -> Self {
        let s = |v: f64| NodeTable::constant(DMatrix::from_element(1, 1, v));
        Self {
            b1: s(b1),
            b2: s(b2),
            c: s(c),
            d1: s(d1),
            d2: s(d2),
            f: s(f),
            g1: s(g1),
            g2: s(g2),
            n_cost: s(n_cost),
            phi1: DMatrix::from_element(1, 1, phi1),
            phi2: DMatrix::from_element(1, 1, phi2),
            positivity: n_cost.clamp(f64::MIN_POSITIVE, 1.0),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.phi1.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.n_cost.at(0).nrows()
    }

    /// Number of nodes spanned by the per-node tables (1 if all constant).
    pub fn node_count(&self) -> usize {
        self.tables().iter().map(|(_, t)| t.entries().len()).max().unwrap_or(1)
    }

    fn tables(&self) -> [(&'static str, &NodeTable<DMatrix<f64>>); 9] {
        [
            ("B1", &self.b1),
            ("B2", &self.b2),
            ("C", &self.c),
            ("D1", &self.d1),
            ("D2", &self.d2),
            ("F", &self.f),
            ("G1", &self.g1),
            ("G2", &self.g2),
            ("N", &self.n_cost),
        ]
    }

    fn shape_errors(&self) -> Vec<String> {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut errors = Vec::new();
        let mut expect = |name: &str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.nrows() != r || mat.ncols() != c {
                errors.push(format!(
                    "{name} has shape {}x{}, expected {r}x{c}",
                    mat.nrows(),
                    mat.ncols()
                ));
            } else if mat.iter().any(|v| !v.is_finite()) {
                errors.push(format!("{name} has non-finite entries"));
            }
        };
        for (name, table) in self.tables() {
            let (r, c) = match name {
                "C" | "F" => (n, m),
                "N" => (m, m),
                _ => (n, n),
            };
            for mat in table.entries() {
                expect(name, mat, r, c);
            }
        }
        expect("Phi1", &self.phi1, n, n);
        expect("Phi2", &self.phi2, n, n);
        let lens: Vec<usize> = self
            .tables()
            .iter()
            .map(|(_, t)| t.entries().len())
            .filter(|&l| l > 1)
            .collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            errors.push("per-node tables have different lengths".into());
        }
        errors
    }

    /// Symmetry, nonnegativity and uniform positivity report.
    pub fn validate(&self) -> LqReport {
        let mut messages = self.shape_errors();
        if !(self.positivity > 0.0) {
            messages.push(format!("N not uniformly positive: floor k must be positive (got {})", self.positivity));
        }
        if !messages.is_empty() {
            return LqReport {
                nodes: Vec::new(),
                phi1_min_eigenvalue: f64::NAN,
                phi2_min_eigenvalue: f64::NAN,
                passed: false,
                messages,
            };
        }
        let k_floor = self.positivity;
        let mut nodes = Vec::new();
        let mut n_ok = true;
        let mut psd_ok = true;
        let mut sym_ok = true;
        for k in 0..self.node_count() {
            let g1 = self.g1.at(k);
            let g2 = self.g2.at(k);
            let nn = self.n_cost.at(k);
            let report = NodeReport {
                k,
                asymmetry: [relative_asymmetry(g1), relative_asymmetry(g2), relative_asymmetry(nn)],
                min_eigenvalues: [min_eigenvalue(g1), min_eigenvalue(g2), min_eigenvalue(nn)],
            };
            sym_ok &= report.asymmetry.iter().all(|&a| a <= 1e-12);
            psd_ok &= report.min_eigenvalues[..2].iter().all(|&e| e >= -PSD_SLACK);
            n_ok &= report.min_eigenvalues[2] >= k_floor - PSD_SLACK;
            nodes.push(report);
        }
        let phi1_min_eigenvalue = min_eigenvalue(&self.phi1);
        let phi2_min_eigenvalue = min_eigenvalue(&self.phi2);
        sym_ok &= relative_asymmetry(&self.phi1) <= 1e-12 && relative_asymmetry(&self.phi2) <= 1e-12;
        psd_ok &= phi1_min_eigenvalue >= -PSD_SLACK && phi2_min_eigenvalue >= -PSD_SLACK;
        if !sym_ok {
            messages.push("cost matrices G1, G2, N, Phi1, Phi2 must be symmetric".into());
        }
        if !psd_ok {
            messages.push("cost matrices G1, G2, Phi1, Phi2 must be nonnegative".into());
        }
        if !n_ok {
            messages.push(format!("N not uniformly positive (N >= {k_floor}*I fails)"));
        }
        LqReport {
            nodes,
            phi1_min_eigenvalue,
            phi2_min_eigenvalue,
            passed: messages.is_empty(),
            messages,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub k: usize,
    /// Relative asymmetry of `G1, G2, N`.
    pub asymmetry: [f64; 3],
    /// Minimal eigenvalues of `G1, G2, N`.
    pub min_eigenvalues: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqReport {
    pub nodes: Vec<NodeReport>,
    pub phi1_min_eigenvalue: f64,
    pub phi2_min_eigenvalue: f64,
    pub passed: bool,
    pub messages: Vec<String>,
}

/// Validated linear-quadratic coefficients viewed as general control
/// coefficients: `h = B₁x + B₂x' + Cu`, `g = D₁x + D₂x' + Fu`.
#[derive(Debug, Clone)]
pub struct LqControl {
    lq: LqCoeffs,
}

pub fn lq_to_control_coeffs(lq: &LqCoeffs) -> Result<LqControl> {
    let report = lq.validate();
    if !report.passed {
        return Err(Error::Validation(report.messages.join("; ")));
    }
    Ok(LqControl { lq: lq.clone() })
}

impl LqControl {
    pub fn coeffs(&self) -> &LqCoeffs {
        &self.lq
    }
}

fn quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

impl ControlCoefficients for LqControl {
    fn state_dim(&self) -> usize {
        self.lq.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.lq.control_dim()
    }
    fn drift(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let k = node.k;
        self.lq.b1.at(k) * x + self.lq.b2.at(k) * xm + self.lq.c.at(k) * u
    }
    fn diffusion(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let k = node.k;
        self.lq.d1.at(k) * x + self.lq.d2.at(k) * xm + self.lq.f.at(k) * u
    }
    fn running_cost(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let k = node.k;
        quad(self.lq.g1.at(k), x) + quad(self.lq.g2.at(k), xm) + quad(self.lq.n_cost.at(k), u)
    }
    fn terminal_cost(&self, x: &DVector<f64>, xm: &DVector<f64>) -> f64 {
        quad(&self.lq.phi1, x) + quad(&self.lq.phi2, xm)
    }
    fn drift_jacobians(&self, node: Node, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> Jacobians {
        let k = node.k;
        Jacobians {
            x: self.lq.b1.at(k).clone(),
            x_mean: self.lq.b2.at(k).clone(),
            u: self.lq.c.at(k).clone(),
        }
    }
    fn diffusion_jacobians(&self, node: Node, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> Jacobians {
        let k = node.k;
        Jacobians {
            x: self.lq.d1.at(k).clone(),
            x_mean: self.lq.d2.at(k).clone(),
            u: self.lq.f.at(k).clone(),
        }
    }
    fn running_cost_gradients(&self, node: Node, x: &DVector<f64>, xm: &DVector<f64>, u: &DVector<f64>) -> Gradients {
        let k = node.k;
        Gradients {
            x: self.lq.g1.at(k) * x * 2.0,
            x_mean: self.lq.g2.at(k) * xm * 2.0,
            u: self.lq.n_cost.at(k) * u * 2.0,
        }
    }
    fn terminal_cost_gradients(&self, x: &DVector<f64>, xm: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.lq.phi1 * x * 2.0, &self.lq.phi2 * xm * 2.0)
    }
    fn as_lq(&self) -> Option<&LqCoeffs> {
        Some(&self.lq)
    }
}

/// Worst relative deviation between supplied derivatives and central
/// differences, per coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub drift: f64,
    pub diffusion: f64,
    pub running_cost: f64,
    pub terminal_cost: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (1.0 + analytic.abs().max(fd.abs()))
}

/// Compares every derivative field against central differences with
/// step `step` at `probes` random points.
pub fn check_derivatives(
    coeffs: &dyn ControlCoefficients,
    grid: &TimeGrid,
    probes: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> DerivativeReport {
    let n = coeffs.state_dim();
    let m = coeffs.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e_h, mut e_g, mut e_l, mut e_phi) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..probes {
        let k = rng.random_range(0..grid.steps());
        let node = Node::on(grid, k);
        let x = normal_vector(&mut rng, n);
        let xm = normal_vector(&mut rng, n);
        let u = normal_vector(&mut rng, m);
        let args = [x, xm, u];
        let dims = [n, n, m];
        let bump = |which: usize, j: usize, s: f64| {
            let mut a = args.clone();
            a[which][j] += s;
            a
        };
        let hj = coeffs.drift_jacobians(node, &args[0], &args[1], &args[2]);
        let gj = coeffs.diffusion_jacobians(node, &args[0], &args[1], &args[2]);
        let lg = coeffs.running_cost_gradients(node, &args[0], &args[1], &args[2]);
        for (which, &dim) in dims.iter().enumerate() {
            for j in 0..dim {
                let p = bump(which, j, step);
                let q = bump(which, j, -step);
                let dh = (coeffs.drift(node, &p[0], &p[1], &p[2]) - coeffs.drift(node, &q[0], &q[1], &q[2]))
                    / (2.0 * step);
                let dg = (coeffs.diffusion(node, &p[0], &p[1], &p[2])
                    - coeffs.diffusion(node, &q[0], &q[1], &q[2]))
                    / (2.0 * step);
                let dl = (coeffs.running_cost(node, &p[0], &p[1], &p[2])
                    - coeffs.running_cost(node, &q[0], &q[1], &q[2]))
                    / (2.0 * step);
                let (jh, jg, gl) = match which {
                    0 => (&hj.x, &gj.x, &lg.x),
                    1 => (&hj.x_mean, &gj.x_mean, &lg.x_mean),
                    _ => (&hj.u, &gj.u, &lg.u),
                };
                for r in 0..n {
                    e_h = e_h.max(rel_err(jh[(r, j)], dh[r]));
                    e_g = e_g.max(rel_err(jg[(r, j)], dg[r]));
                }
                e_l = e_l.max(rel_err(gl[j], dl));
            }
        }
        let (px, pxm) = coeffs.terminal_cost_gradients(&args[0], &args[1]);
        for which in 0..2 {
            for j in 0..n {
                let p = bump(which, j, step);
                let q = bump(which, j, -step);
                let d = (coeffs.terminal_cost(&p[0], &p[1]) - coeffs.terminal_cost(&q[0], &q[1])) / (2.0 * step);
                let a = if which == 0 { px[j] } else { pxm[j] };
                e_phi = e_phi.max(rel_err(a, d));
            }
        }
    }
    DerivativeReport {
        drift: e_h,
        diffusion: e_g,
        running_cost: e_l,
        terminal_cost: e_phi,
        tolerance,
        passed: [e_h, e_g, e_l, e_phi].iter().all(|&e| e <= tolerance),
    }
}

/// Sampled growth bounds on `l`, its gradients, `Φ` and `Φ_x`.
///
/// The bound on `‖Φ_x‖_H` is checked in two forms: with `‖x'‖_H` to the
/// first power (`phi_grad_linear`) and squared (`phi_grad_quadratic`).
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    pub constant: f64,
    pub running_cost: f64,
    pub running_cost_gradient: f64,
    pub terminal_cost: f64,
    pub terminal_gradient_linear: f64,
    pub terminal_gradient_quadratic: f64,
}

impl GrowthReport {
    pub fn running_ok(&self) -> bool {
        self.running_cost <= self.constant && self.running_cost_gradient <= self.constant
    }

    pub fn terminal_ok(&self) -> bool {
        self.terminal_cost <= self.constant && self.terminal_gradient_quadratic <= self.constant
    }

    pub fn phi_grad_linear(&self) -> bool {
        self.terminal_gradient_linear <= self.constant
    }

    pub fn phi_grad_quadratic(&self) -> bool {
        self.terminal_gradient_quadratic <= self.constant
    }

    pub fn passed(&self) -> bool {
        self.running_ok() && self.terminal_ok()
    }
}

/// Measures the smallest constants compatible with the growth bounds over
/// points sampled in the ball of radius `radius`.
pub fn check_growth(
    coeffs: &dyn ControlCoefficients,
    triple: &DiscreteTriple,
    grid: &TimeGrid,
    constant: f64,
    radius: f64,
    probes: usize,
    seed: u64,
) -> GrowthReport {
    let n = coeffs.state_dim();
    let m = coeffs.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = |v: &DVector<f64>| triple.h_norm_sq(v).max(0.0).sqrt();
    let h_dual = |v: &DVector<f64>| h(&triple.h_riesz(v));
    let mut report = GrowthReport {
        constant,
        running_cost: 0.0,
        running_cost_gradient: 0.0,
        terminal_cost: 0.0,
        terminal_gradient_linear: 0.0,
        terminal_gradient_quadratic: 0.0,
    };
    for _ in 0..probes {
        let k = rng.random_range(0..grid.steps());
        let node = Node::on(grid, k);
        let scale = radius * rng.random::<f64>();
        let x = normal_vector(&mut rng, n) * scale;
        let xm = normal_vector(&mut rng, n) * scale;
        let u = normal_vector(&mut rng, m) * scale;
        let (nx, nxm, nu) = (h(&x), h(&xm), u.norm());
        let l = coeffs.running_cost(node, &x, &xm, &u);
        let lg = coeffs.running_cost_gradients(node, &x, &xm, &u);
        report.running_cost = report
            .running_cost
            .max(l.abs() / (1.0 + nx * nx + nxm * nxm + nu * nu));
        report.running_cost_gradient = report
            .running_cost_gradient
            .max((h_dual(&lg.x) + h_dual(&lg.x_mean) + lg.u.norm()) / (1.0 + nx + nxm + nu));
        let phi = coeffs.terminal_cost(&x, &xm);
        let (px, _) = coeffs.terminal_cost_gradients(&x, &xm);
        report.terminal_cost = report.terminal_cost.max(phi.abs() / (1.0 + nx * nx + nxm * nxm));
        report.terminal_gradient_linear = report
            .terminal_gradient_linear
            .max(h_dual(&px) / (1.0 + nx + nxm));
        report.terminal_gradient_quadratic = report
            .terminal_gradient_quadratic
            .max(h_dual(&px) / (1.0 + nx + nxm * nxm));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 10).unwrap()
    }

    #[test]
    fn lipschitz_of_constant_map_is_zero() {
        let tri = DiscreteTriple::identity(3);
        let b = MeanFieldMap::constant(DVector::from_element(3, 2.0));
        assert_eq!(estimate_lipschitz(&b, &tri, &grid(), 50, 1).unwrap(), 0.0);
    }

    #[test]
    fn lipschitz_of_linear_map_is_exact() {
        let tri = DiscreteTriple::identity(3);
        let b = MeanFieldMap::new(3, 2.0, |_, _, x| x * 2.0);
        let est = estimate_lipschitz(&b, &tri, &grid(), 20, 2).unwrap();
        assert!((est - 2.0).abs() < 1e-9, "{est}");
    }

    #[test]
    fn lipschitz_of_mixed_map_lies_in_operator_norm_band() {
        // Oracle: ‖Δx' + 3Δx‖ ≤ 3(‖Δx‖ + ‖Δx'‖), with equality along x alone.
        let tri = DiscreteTriple::identity(4);
        let b = MeanFieldMap::new(4, 4.0, |_, xp, x| xp + x * 3.0);
        let est = estimate_lipschitz(&b, &tri, &grid(), 1000, 3).unwrap();
        assert!((3.0 - 1e-9..=4.0).contains(&est), "{est}");
    }

    #[test]
    fn lipschitz_flags_non_finite() {
        let tri = DiscreteTriple::identity(1);
        let b = MeanFieldMap::new(1, 1.0, |_, _, x| x.map(|v| 1.0 / (v - v)));
        assert!(matches!(
            estimate_lipschitz(&b, &tri, &grid(), 5, 0),
            Err(Error::Validation(_))
        ));
        assert!(estimate_lipschitz(&b, &tri, &grid(), 1, 0).is_err());
    }

    #[test]
    fn lipschitz_is_monotone_in_probe_count() {
        let tri = DiscreteTriple::identity(2);
        let b = MeanFieldMap::new(2, 1.0, |_, xp, x| {
            DVector::from_fn(2, |i, _| (x[i] + 0.5 * xp[(i + 1) % 2]).sin())
        });
        let small = estimate_lipschitz(&b, &tri, &grid(), 10, 9).unwrap();
        let large = estimate_lipschitz(&b, &tri, &grid(), 200, 9).unwrap();
        assert!(large >= small);
    }

    #[test]
    fn backward_driver_probe_uses_four_arguments() {
        let tri = DiscreteTriple::identity(2);
        let f = BackwardDriver::new(2, 1.0, |_, ym, _zm, _y, z| ym * 0.5 + z);
        let est = estimate_lipschitz(&f, &tri, &grid(), 100, 4).unwrap();
        assert!((est - 1.0).abs() < 1e-9, "{est}");
    }

    #[test]
    fn validate_lq_examples() {
        let lq = LqCoeffs::zeros(2, 1);
        assert!(lq.validate().passed);

        let mut bad = LqCoeffs::zeros(1, 1);
        bad.n_cost = NodeTable::constant(DMatrix::zeros(1, 1));
        let report = bad.validate();
        assert!(!report.passed);
        assert!(report.messages.iter().any(|m| m.contains("N not uniformly positive")));

        let mut semi = LqCoeffs::zeros(2, 1);
        semi.g1 = NodeTable::constant(DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 1.0])));
        let report = semi.validate();
        assert!(report.passed, "{:?}", report.messages);
        assert!(report.nodes[0].min_eigenvalues[0].abs() < 1e-15);
    }

    #[test]
    fn validate_lq_reports_shape_errors() {
        let mut lq = LqCoeffs::zeros(2, 1);
        lq.c = NodeTable::constant(DMatrix::zeros(3, 1));
        let report = lq.validate();
        assert!(!report.passed);
        assert!(lq_to_control_coeffs(&lq).is_err());
    }

    #[test]
    fn lq_specialization_examples() {
        let lq = LqCoeffs::scalar(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let ctl = lq_to_control_coeffs(&lq).unwrap();
        let one = DVector::from_element(1, 1.0);
        let node = Node { k: 0, t: 0.0 };
        assert_eq!(ctl.running_cost(node, &one, &one, &one), 3.0);
        let j = ctl.drift_jacobians(node, &one, &one, &DVector::from_element(1, 7.0));
        assert_eq!(j.u, *lq.c.at(0));
    }

    #[test]
    fn lq_gradients_are_twice_the_forms() {
        let mut lq = LqCoeffs::zeros(3, 2);
        let g1 = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0]);
        lq.g1 = NodeTable::constant(g1.clone());
        let ctl = lq_to_control_coeffs(&lq).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = normal_vector(&mut rng, 3);
            let g = ctl.running_cost_gradients(Node { k: 0, t: 0.0 }, &x, &x, &DVector::zeros(2));
            assert!((g.x - &g1 * &x * 2.0).amax() < 1e-14);
        }
    }

    #[test]
    fn lq_derivatives_match_finite_differences() {
        let mut lq = LqCoeffs::zeros(2, 2);
        lq.b1 = NodeTable::constant(DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.3, 0.4]));
        lq.d2 = NodeTable::constant(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.2]));
        lq.f = NodeTable::constant(DMatrix::identity(2, 2));
        lq.g2 = NodeTable::constant(DMatrix::identity(2, 2));
        lq.phi1 = DMatrix::identity(2, 2) * 2.0;
        let ctl = lq_to_control_coeffs(&lq).unwrap();
        let report = check_derivatives(&ctl, &grid(), 50, 11, 1e-5, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn derivative_check_catches_wrong_gradient() {
        let coeffs = FnControlCoeffs::zero(1, 1).with_running_cost(
            |_, x, _, u| x[0] * x[0] + u[0] * u[0],
            |_, x, _, u| Gradients {
                x: x * 2.0,
                x_mean: DVector::zeros(1),
                u: u * 3.0,
            },
        );
        let report = check_derivatives(&coeffs, &grid(), 20, 1, 1e-5, 1e-4);
        assert!(!report.passed);
        assert!(report.running_cost > 1e-2);
    }

    #[test]
    fn growth_check_on_lq_reports_both_phi_forms() {
        let mut lq = LqCoeffs::zeros(1, 1);
        lq.g1 = NodeTable::constant(DMatrix::from_element(1, 1, 1.0));
        lq.phi1 = DMatrix::from_element(1, 1, 1.0);
        let ctl = lq_to_control_coeffs(&lq).unwrap();
        let tri = DiscreteTriple::identity(1);
        let report = check_growth(&ctl, &tri, &grid(), 3.0, 10.0, 200, 3);
        assert!(report.passed(), "{report:?}");
        assert!(report.phi_grad_linear());
    }
}
