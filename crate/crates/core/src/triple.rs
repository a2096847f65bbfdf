//! Finite-dimensional Gelfand triple `V ⊂ H ⊂ V*` on ℝⁿ.
//!
//! `H` carries the inner product `xᵀ G_H y` and `V` the inner product
//! `xᵀ G_V y`. Operators `A` act on coordinate vectors; the duality pairing
//! `⟨A x, y⟩` is realized as `(A x, y)_H = xᵀ Aᵀ G_H y`, which is the
//! continuous extension of the `H` inner product.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::check_dim;
use crate::linalg::{
    all_finite, min_eigenvalue, pencil_eigenvalues, pencil_singular_max,
    relative_asymmetry, spd_cholesky, symmetric_part,
};
use crate::{Error, Result};

/// Eigenvalue slack used by every positive-semidefiniteness certificate.
pub const PSD_SLACK: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DiscreteTriple {
    gram_h: DMatrix<f64>,
    gram_v: DMatrix<f64>,
    chol_h: Cholesky<f64, Dyn>,
    chol_v: Cholesky<f64, Dyn>,
}

impl DiscreteTriple {
    pub fn new(gram_h: DMatrix<f64>, gram_v: DMatrix<f64>) -> Result<Self> {
        let n = gram_h.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("triple dimension must be positive".into()));
        }
        check_dim("gramH columns", n, gram_h.ncols())?;
        check_dim("gramV rows", n, gram_v.nrows())?;
        check_dim("gramV columns", n, gram_v.ncols())?;
        for (name, g) in [("gramH", &gram_h), ("gramV", &gram_v)] {
            if !all_finite(g) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
            if relative_asymmetry(g) > SYMMETRY_TOL {
                return Err(Error::Validation(format!("{name} is not symmetric")));
            }
            if min_eigenvalue(g) <= 0.0 {
                return Err(Error::Validation(format!("{name} is not positive definite")));
            }
        }
        let gram_h = symmetric_part(&gram_h);
        let gram_v = symmetric_part(&gram_v);
        let chol_h = spd_cholesky(&gram_h, "gramH")?;
        let chol_v = spd_cholesky(&gram_v, "gramV")?;
        Ok(Self {
            gram_h,
            gram_v,
            chol_h,
            chol_v,
        })
    }

    /// `H = V = ℝⁿ` with the Euclidean inner product.
    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n))
            .expect("identity Gram matrices are valid")
    }

    pub fn dim(&self) -> usize {
        self.gram_h.nrows()
    }

    pub fn gram_h(&self) -> &DMatrix<f64> {
        &self.gram_h
    }

    pub fn gram_v(&self) -> &DMatrix<f64> {
        &self.gram_v
    }

    pub fn h_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_dim("h_inner lhs", self.dim(), x.len())?;
        check_dim("h_inner rhs", self.dim(), y.len())?;
        Ok(self.h_inner_unchecked(x, y))
    }

    pub(crate) fn h_inner_unchecked(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&(&self.gram_h * y))
    }

    pub fn h_norm_sq(&self, x: &DVector<f64>) -> f64 {
        self.h_inner_unchecked(x, x)
    }

    pub fn v_norm_sq(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.gram_v * x))
    }

    /// `G_H⁻¹ v`: converts a coordinate gradient into its `H`-Riesz representer.
    pub fn h_riesz(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol_h.solve(v)
    }

    pub(crate) fn h_riesz_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_h.solve(m)
    }

    /// Largest `c` with `‖x‖_V ≥ c‖x‖_H` for all `x`.
    pub fn embedding_constant(&self) -> f64 {
        pencil_eigenvalues(&self.gram_v, &self.chol_h).min().max(0.0).sqrt()
    }

    /// `H`-adjoint `A* = G_H⁻¹ Aᵀ G_H`, so that `(A x, y)_H = (x, A* y)_H`.
    pub fn adjoint_in_h(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_square(a, "adjoint_in_h")?;
        Ok(self.chol_h.solve(&(a.transpose() * &self.gram_h)))
    }

    /// Coercivity `⟨A x, x⟩ + λ‖x‖²_H ≥ α‖x‖²_V`, certified through the
    /// symmetric part of the quadratic form.
    pub fn check_coercivity(
        &self,
        a: &DMatrix<f64>,
        alpha: f64,
        lambda: f64,
    ) -> Result<CoercivityReport> {
        if !(alpha > 0.0) || !alpha.is_finite() || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "coercivity needs finite alpha > 0 and finite lambda (got {alpha}, {lambda})"
            )));
        }
        self.check_square(a, "check_coercivity")?;
        let form = self.pairing_form(a) + &self.gram_h * lambda - &self.gram_v * alpha;
        let min_eigenvalue = min_eigenvalue(&form);
        Ok(CoercivityReport {
            passed: min_eigenvalue >= -PSD_SLACK,
            min_eigenvalue,
        })
    }

    /// Boundedness `‖A‖_{𝓛(V,V*)} ≤ C`.
    pub fn check_boundedness(&self, a: &DMatrix<f64>, bound: f64) -> Result<BoundednessReport> {
        if !(bound > 0.0) {
            return Err(Error::InvalidInput(format!(
                "boundedness constant must be positive (got {bound})"
            )));
        }
        self.check_square(a, "check_boundedness")?;
        let norm = self.operator_norm(a);
        Ok(BoundednessReport {
            passed: norm <= bound + PSD_SLACK,
            norm,
        })
    }

    /// Norm of `A` as a map `V → V*`.
    pub fn operator_norm(&self, a: &DMatrix<f64>) -> f64 {
        pencil_singular_max(&self.pairing_form(a), &self.chol_v)
    }

    /// Matrix `B` with `⟨A x, y⟩ = yᵀ B x`, i.e. `G_H A`.
    pub fn pairing_form(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.gram_h * a
    }

    /// Smallest `λ ≥ 0` for which `A` is coercive with the given `α`.
    pub fn minimal_lambda(&self, a: &DMatrix<f64>, alpha: f64) -> f64 {
        let defect = &self.gram_v * alpha - symmetric_part(&self.pairing_form(a));
        pencil_eigenvalues(&defect, &self.chol_h).max().max(0.0)
    }

    fn check_square(&self, a: &DMatrix<f64>, what: &'static str) -> Result<()> {
        check_dim(what, self.dim(), a.nrows())?;
        check_dim(what, self.dim(), a.ncols())?;
        if !all_finite(a) {
            return Err(Error::InvalidInput(format!("{what}: non-finite matrix entries")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityReport {
    pub passed: bool,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundednessReport {
    pub passed: bool,
    pub norm: f64,
}

/// Uniform grid `t_k = k T / N` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!("horizon must be positive (got {horizon})")));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }
}

/// Principal operator `A(t_k)` on the grid with its certified constants.
#[derive(Debug, Clone)]
pub struct OperatorProcess {
    values: Vec<DMatrix<f64>>,
    alpha: f64,
    lambda: f64,
    bound: f64,
}

impl OperatorProcess {
    /// `values` holds either one matrix (time-invariant) or one per node.
    /// Every matrix must pass both certificates with the declared constants.
    pub fn new(
        triple: &DiscreteTriple,
        values: Vec<DMatrix<f64>>,
        alpha: f64,
        lambda: f64,
        bound: f64,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("operator process needs at least one matrix".into()));
        }
        for (k, a) in values.iter().enumerate() {
            let coercive = triple.check_coercivity(a, alpha, lambda)?;
            if !coercive.passed {
                return Err(Error::Validation(format!(
                    "operator at node {k} is not coercive with alpha={alpha}, lambda={lambda} \
                     (min eigenvalue {:.3e})",
                    coercive.min_eigenvalue
                )));
            }
            let bounded = triple.check_boundedness(a, bound)?;
            if !bounded.passed {
                return Err(Error::Validation(format!(
                    "operator at node {k} has V->V* norm {:.6e} above bound {bound}",
                    bounded.norm
                )));
            }
        }
        Ok(Self {
            values,
            alpha,
            lambda,
            bound,
        })
    }

    /// Certifies `values` with coercivity constant `alpha`, choosing the
    /// smallest admissible `λ` and the measured norm as the bound.
    pub fn certified(triple: &DiscreteTriple, values: Vec<DMatrix<f64>>, alpha: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("operator process needs at least one matrix".into()));
        }
        let mut lambda: f64 = 0.0;
        let mut bound: f64 = 0.0;
        for a in &values {
            triple.check_square(a, "operator process")?;
            lambda = lambda.max(triple.minimal_lambda(a, alpha));
            bound = bound.max(triple.operator_norm(a));
        }
        // pad against eigen-solver round-off
        let lambda = lambda * (1.0 + 1e-9) + 1e-12;
        let bound = (bound * (1.0 + 1e-9)).max(1e-12);
        Self::new(triple, values, alpha, lambda, bound)
    }

    /// The zero operator, certified with `α = 1`.
    pub fn zero(triple: &DiscreteTriple) -> Self {
        let n = triple.dim();
        Self::certified(triple, vec![DMatrix::zeros(n, n)], 1.0)
            .expect("zero operator is always certifiable")
    }

    pub fn constant(triple: &DiscreteTriple, a: DMatrix<f64>, alpha: f64) -> Result<Self> {
        Self::certified(triple, vec![a], alpha)
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        if self.values.len() == 1 {
            &self.values[0]
        } else {
            &self.values[k.min(self.values.len() - 1)]
        }
    }

    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Checks that the process covers `grid` (one matrix or `N + 1`).
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.values.len() == 1 || self.values.len() == grid.steps() + 1 {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: "operator process nodes",
                expected: grid.steps() + 1,
                found: self.values.len(),
            })
        }
    }

    /// `H`-adjoint process `A*(t_k)`.
    pub fn adjoint(&self, triple: &DiscreteTriple) -> Result<Vec<DMatrix<f64>>> {
        self.values.iter().map(|a| triple.adjoint_in_h(a)).collect()
    }
}

/// Dirichlet Laplacian stiffness `tridiag(-1, 2, -1)` on `n` interior nodes.
pub fn dirichlet_stiffness(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            2.0
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Largest eigenvalue of the pencil `(a, gram)` for symmetric `a`.
pub fn pencil_max(a: &DMatrix<f64>, gram: &DMatrix<f64>) -> Result<f64> {
    let chol = spd_cholesky(gram, "pencil Gram matrix")?;
    Ok(pencil_eigenvalues(a, &chol).max())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn h_inner_examples() {
        let id = DiscreteTriple::identity(2);
        let e1 = DVector::from_row_slice(&[1.0, 0.0]);
        let e2 = DVector::from_row_slice(&[0.0, 1.0]);
        assert_eq!(id.h_inner(&e1, &e2).unwrap(), 0.0);

        let tri = DiscreteTriple::new(diag(&[1.0, 2.0]), diag(&[1.0, 2.0])).unwrap();
        let ones = DVector::from_element(2, 1.0);
        assert_eq!(tri.h_inner(&ones, &ones).unwrap(), 3.0);
    }

    #[test]
    fn h_inner_rejects_wrong_length() {
        let tri = DiscreteTriple::identity(2);
        let x = DVector::from_element(3, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(matches!(
            tri.h_inner(&x, &y),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn triple_rejects_indefinite_gram() {
        let bad = diag(&[1.0, -1.0]);
        assert!(DiscreteTriple::new(bad.clone(), DMatrix::identity(2, 2)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(DiscreteTriple::new(DMatrix::identity(2, 2), asym).is_err());
    }

    #[test]
    fn scalar_coercivity_examples() {
        let tri = DiscreteTriple::identity(1);
        let a = DMatrix::from_element(1, 1, 1.0);
        assert!(tri.check_coercivity(&a, 1.0, 0.0).unwrap().passed);
        let a = DMatrix::from_element(1, 1, -1.0);
        assert!(tri.check_coercivity(&a, 1.0, 2.0).unwrap().passed);
        assert!(!tri.check_coercivity(&a, 1.0, 1.0).unwrap().passed);
    }

    #[test]
    fn coercivity_rejects_bad_input() {
        let tri = DiscreteTriple::identity(1);
        let a = DMatrix::from_element(1, 1, f64::NAN);
        assert!(tri.check_coercivity(&a, 1.0, 0.0).is_err());
        let a = DMatrix::from_element(1, 1, 1.0);
        assert!(tri.check_coercivity(&a, 0.0, 0.0).is_err());
        assert!(tri.check_boundedness(&DMatrix::from_element(1, 1, f64::INFINITY), 1.0).is_err());
    }

    #[test]
    fn laplacian_stiffness_is_coercive_and_bounded_at_pencil_bound() {
        let n = 16;
        let k = dirichlet_stiffness(n);
        let gram_v = &k + DMatrix::identity(n, n);
        let tri = DiscreteTriple::new(DMatrix::identity(n, n), gram_v.clone()).unwrap();
        let report = tri.check_coercivity(&k, 1.0, 1.0).unwrap();
        assert!(report.passed, "{report:?}");

        // Oracle: the pencil (K, K + I) has eigenvalues μ/(μ + 1) for the
        // Laplacian eigenvalues μ_j = 2 - 2cos(jπ/(n+1)).
        let oracle = (1..=n)
            .map(|j| {
                let mu = 2.0 - 2.0 * (j as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos();
                mu / (mu + 1.0)
            })
            .fold(0.0_f64, f64::max);
        let bound = pencil_max(&k, &gram_v).unwrap();
        assert!((bound - oracle).abs() < 1e-12);
        let b = tri.check_boundedness(&k, bound).unwrap();
        assert!(b.passed, "{b:?}");
        assert!(!tri.check_boundedness(&k, bound * (1.0 - 1e-6)).unwrap().passed);
    }

    #[test]
    fn boundedness_examples() {
        let tri = DiscreteTriple::identity(1);
        assert!(tri.check_boundedness(&DMatrix::zeros(1, 1), 0.5).unwrap().passed);
        let three = DMatrix::from_element(1, 1, 3.0);
        assert!(!tri.check_boundedness(&three, 2.0).unwrap().passed);
    }

    #[test]
    fn adjoint_examples() {
        let id = DiscreteTriple::identity(2);
        let sym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        assert_eq!(id.adjoint_in_h(&sym).unwrap(), sym);

        let tri = DiscreteTriple::new(diag(&[1.0, 2.0]), diag(&[1.0, 2.0])).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let adj = tri.adjoint_in_h(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.0]);
        assert!((adj.clone() - expected).amax() < 1e-15);
        // duality identity on basis vectors
        for i in 0..2 {
            for j in 0..2 {
                let x = DVector::from_fn(2, |r, _| f64::from(u8::from(r == i)));
                let y = DVector::from_fn(2, |r, _| f64::from(u8::from(r == j)));
                let lhs = tri.h_inner(&(&a * &x), &y).unwrap();
                let rhs = tri.h_inner(&x, &(&adj * &y)).unwrap();
                assert!((lhs - rhs).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_nodes_hit_endpoints() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(7), 0.3);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
    }

    #[test]
    fn operator_process_rejects_non_coercive() {
        let tri = DiscreteTriple::identity(1);
        let a = DMatrix::from_element(1, 1, -1.0);
        assert!(OperatorProcess::new(&tri, vec![a.clone()], 1.0, 1.0, 2.0).is_err());
        assert!(OperatorProcess::new(&tri, vec![a], 1.0, 2.0, 2.0).is_ok());
    }
}
