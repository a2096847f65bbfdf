//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{Error, Result};

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

fn column_sum_range(m: &DMatrix<f64>, lo: usize, hi: usize) -> DVector<f64> {
    if hi - lo <= PAIRWISE_BLOCK {
        let mut acc = DVector::zeros(m.nrows());
        for j in lo..hi {
            acc += m.column(j);
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    column_sum_range(m, lo, mid) + column_sum_range(m, mid, hi)
}

/// Mean of the columns of `m`, summed pairwise.
pub fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    if m.ncols() == 0 {
        return DVector::zeros(m.nrows());
    }
    column_sum_range(m, 0, m.ncols()) / m.ncols() as f64
}

/// Mean of a list of vectors, summed pairwise.
pub fn vector_mean(vs: &[DVector<f64>]) -> DVector<f64> {
    fn range(vs: &[DVector<f64>]) -> DVector<f64> {
        if vs.len() <= PAIRWISE_BLOCK {
            let mut acc = DVector::zeros(vs[0].len());
            for v in vs {
                acc += v;
            }
            return acc;
        }
        let mid = vs.len() / 2;
        range(&vs[..mid]) + range(&vs[mid..])
    }
    assert!(!vs.is_empty(), "mean of an empty vector list");
    range(vs) / vs.len() as f64
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn symmetric_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest |a_ij - a_ji| relative to the largest entry magnitude.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).amax() / scale
}

pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetric_part(a)).eigenvalues
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).min()
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).max()
}

/// Eigenvalues of the symmetric pencil `(s, b)`, i.e. of `L⁻¹ s L⁻ᵀ` where
/// `b = L Lᵀ`. `b` must be symmetric positive definite.
pub fn pencil_eigenvalues(s: &DMatrix<f64>, b_chol: &Cholesky<f64, Dyn>) -> DVector<f64> {
    let l = b_chol.l();
    let inner = l
        .solve_lower_triangular(&symmetric_part(s))
        .expect("Cholesky factor is nonsingular");
    let whitened = l
        .solve_lower_triangular(&inner.transpose())
        .expect("Cholesky factor is nonsingular");
    symmetric_eigenvalues(&whitened)
}

/// Largest singular value of `L⁻¹ a L⁻ᵀ` for `b = L Lᵀ`.
pub fn pencil_singular_max(a: &DMatrix<f64>, b_chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = b_chol.l();
    let inner = l
        .solve_lower_triangular(a)
        .expect("Cholesky factor is nonsingular");
    let whitened = l
        .solve_lower_triangular(&inner.transpose())
        .expect("Cholesky factor is nonsingular")
        .transpose();
    if whitened.nrows() == 0 {
        return 0.0;
    }
    whitened.singular_values().max()
}

pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::Validation(format!("{what} is not positive definite")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
    }

    #[test]
    fn column_mean_of_mirrored_columns_is_zero() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.5, -2.5]);
        assert_eq!(column_mean(&m), DVector::zeros(2));
    }

    #[test]
    fn pencil_of_matrix_with_itself_is_identity() {
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let chol = spd_cholesky(&b, "b").unwrap();
        let ev = pencil_eigenvalues(&b, &chol);
        for e in ev.iter() {
            assert!((e - 1.0).abs() < 1e-12);
        }
    }
}
