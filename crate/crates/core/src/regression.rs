//! Least-squares projections onto polynomial features of the current node,
//! used as conditional expectations given the information at that node.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// What the regression features are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSource {
    #[default]
    State,
    Brownian,
    StateAndBrownian,
}

/// Polynomial basis of total degree 1 (affine) or 2 with a ridge term on
/// the standardized normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    degree: usize,
    ridge: f64,
    source: FeatureSource,
}

pub const DEFAULT_RIDGE: f64 = 1e-10;

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::affine()
    }
}

impl RegressionBasis {
    pub fn affine() -> Self {
        Self {
            degree: 1,
            ridge: DEFAULT_RIDGE,
            source: FeatureSource::State,
        }
    }

    pub fn new(degree: usize, ridge: f64, source: FeatureSource) -> Result<Self> {
        if !(1..=2).contains(&degree) {
            return Err(Error::InvalidInput(format!("basis degree must be 1 or 2 (got {degree})")));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidInput(format!("ridge must be finite and nonnegative (got {ridge})")));
        }
        Ok(Self { degree, ridge, source })
    }

    pub fn with_source(mut self, source: FeatureSource) -> Self {
        self.source = source;
        self
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    /// Raw feature matrix (`M × p`, no constant column) from the primary
    /// variables, given as a `d × M` matrix.
    fn features(&self, vars: &DMatrix<f64>) -> DMatrix<f64> {
        let d = vars.nrows();
        let m = vars.ncols();
        let quad = if self.degree >= 2 { d * (d + 1) / 2 } else { 0 };
        let mut f = DMatrix::zeros(m, d + quad);
        for i in 0..m {
            let mut c = 0;
            for a in 0..d {
                f[(i, c)] = vars[(a, i)];
                c += 1;
            }
            if self.degree >= 2 {
                for a in 0..d {
                    for b in a..d {
                        f[(i, c)] = vars[(a, i)] * vars[(b, i)];
                        c += 1;
                    }
                }
            }
        }
        f
    }

    /// Builds the projector at one node. `states` is `n × M`, `brownian`
    /// holds the `M` Brownian values at the node.
    pub fn projector(&self, states: &DMatrix<f64>, brownian: &[f64], node: usize) -> Result<Projector> {
        let m = states.ncols();
        let vars = match self.source {
            FeatureSource::State => states.clone(),
            FeatureSource::Brownian => DMatrix::from_row_slice(1, m, brownian),
            FeatureSource::StateAndBrownian => {
                let mut v = states.clone().insert_row(states.nrows(), 0.0);
                for (i, w) in brownian.iter().enumerate() {
                    v[(states.nrows(), i)] = *w;
                }
                v
            }
        };
        Projector::fit(self.features(&vars), self.ridge, node)
    }
}

/// Orthogonal-projection operator onto `span{1, features}` over the ensemble.
#[derive(Debug, Clone)]
pub struct Projector {
    /// Standardized kept features, `M × p`.
    design: DMatrix<f64>,
    /// `(ZᵀZ/M + ridge·I)⁻¹`, `p × p`.
    gram_inv: DMatrix<f64>,
    node: usize,
}

impl Projector {
    fn fit(raw: DMatrix<f64>, ridge: f64, node: usize) -> Result<Self> {
        let m = raw.nrows();
        if m == 0 {
            return Err(Error::InvalidInput("regression needs at least one sample".into()));
        }
        let mf = m as f64;
        let mut kept = Vec::new();
        for c in 0..raw.ncols() {
            let col = raw.column(c);
            let mean = col.sum() / mf;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
            let sd = var.sqrt();
            // constant columns are already covered by the intercept
            if sd > 1e-12 * (1.0 + mean.abs()) {
                kept.push(col.map(|v| (v - mean) / sd));
            }
        }
        if kept.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient { node });
        }
        let design = if kept.is_empty() {
            DMatrix::zeros(m, 0)
        } else {
            DMatrix::from_columns(&kept)
        };
        let p = design.ncols();
        let mut gram = design.tr_mul(&design) / mf;
        for i in 0..p {
            gram[(i, i)] += ridge;
        }
        let gram_inv = match gram.cholesky() {
            Some(ch) => ch.inverse(),
            None => return Err(Error::RankDeficient { node }),
        };
        if gram_inv.iter().any(|v| !v.is_finite()) || (p > 0 && gram_inv.amax() > 1e14) {
            return Err(Error::RankDeficient { node });
        }
        Ok(Self { design, gram_inv, node })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    /// Number of non-constant features kept after dropping degenerate ones.
    pub fn feature_count(&self) -> usize {
        self.design.ncols()
    }

    /// Fitted values of each row of `targets` (`r × M`), row by row.
    pub fn project(&self, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.design.nrows();
        if targets.ncols() != m {
            return Err(Error::DimensionMismatch {
                what: "regression targets",
                expected: m,
                found: targets.ncols(),
            });
        }
        let mf = m as f64;
        let mut out = DMatrix::zeros(targets.nrows(), m);
        for r in 0..targets.nrows() {
            let row = targets.row(r).transpose();
            let mean = crate::linalg::pairwise_mean(row.as_slice());
            let centered = row.map(|v| v - mean);
            let fitted: DVector<f64> = if self.design.ncols() > 0 {
                let rhs = self.design.tr_mul(&centered) / mf;
                let beta = &self.gram_inv * rhs;
                &self.design * beta
            } else {
                DVector::zeros(m)
            };
            for i in 0..m {
                out[(r, i)] = mean + fitted[i];
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient { node: self.node });
        }
        Ok(out)
    }
}
