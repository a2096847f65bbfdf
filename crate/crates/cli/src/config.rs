//! TOML experiment configuration. Unknown keys are rejected and the seed is
//! mandatory; matrices may be inline rows, a scalar multiple of the
//! identity, or a reference to a headerless CSV file.

use std::path::{Path, PathBuf};

use mfspde::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ForwardSim,
    BackwardSolve,
    Gradcheck,
    LqSolve,
    Cauchy,
    DependenceStudy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<BackwardConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cauchy: Option<CauchyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    /// `s·I`.
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    File { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorValue {
    /// Every entry equal.
    Scalar(f64),
    List(Vec<f64>),
    File { file: PathBuf },
}

/// Linear mean-field state equation
/// `dX = [−AX + B₁X + B₂𝔼X + b] dt + [D₁X + D₂𝔼X + g] dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_h: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_v: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<MatrixValue>,
    /// Coercivity constant; `λ` and the bound are certified from it.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub initial: VectorValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_state: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_mean: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_offset: Option<VectorValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion_state: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion_mean: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion_offset: Option<VectorValue>,
    #[serde(default)]
    pub form: FormConfig,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormConfig {
    #[default]
    EnsembleMean,
    IndependentCopy,
}

/// Backward equation driven by the forward ensemble of `[problem]`:
/// driver `f = F_y Y + F_z Z + F_ȳ 𝔼Y + F_z̄ 𝔼Z + f₀`, terminal
/// `ξ = T X(T) + w·W(T) + ξ₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_y: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_z: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_y_mean: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_z_mean: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_offset: Option<VectorValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_state: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_brownian: Option<VectorValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_offset: Option<VectorValue>,
}

/// Linear-quadratic data on top of `[problem]` (which supplies the triple,
/// `A` and the initial state; its drift and diffusion entries are unused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub control_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi1: Option<MatrixValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi2: Option<MatrixValue>,
    /// Uniform lower bound `k` of `N`; defaults to its smallest eigenvalue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum ProfileConfig {
    Constant { value: f64 },
    SinBump { base: f64, amplitude: f64, frequency: f64 },
    Gaussian { base: f64, amplitude: f64, center: f64, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CauchyConfig {
    #[serde(default = "one")]
    pub dim: usize,
    pub mesh: usize,
    pub half_width: f64,
    pub kappa: f64,
    pub big_k: f64,
    pub a: ProfileConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<ProfileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<ProfileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<ProfileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<ProfileConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<ProfileConfig>,
    pub initial: ProfileConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyTarget {
    Forward,
    ForwardApriori,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbedTerm {
    Drift,
    Diffusion,
    Terminal,
    Driver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub target: StudyTarget,
    /// Strictly decreasing ladder of perturbation sizes (or data scales).
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbedTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<VectorValue>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    FixedPoint,
    Gradient,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFeatures {
    #[default]
    State,
    Brownian,
    StateAndBrownian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Estimate the damping from the spectrum of the fixed-point map.
    #[serde(default)]
    pub auto_damping: bool,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Optimize over deterministic (per-step) controls.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "one")]
    pub basis_degree: usize,
    #[serde(default)]
    pub basis_features: BasisFeatures,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_max_picard")]
    pub max_picard: usize,
}

fn default_damping() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    500
}
fn default_ridge() -> f64 {
    mfspde::regression::DEFAULT_RIDGE
}
fn default_picard_tol() -> f64 {
    1e-10
}
fn default_max_picard() -> usize {
    50
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            damping: default_damping(),
            auto_damping: false,
            tol: default_tol(),
            max_iter: default_max_iter(),
            deterministic: false,
            basis_degree: 1,
            basis_features: BasisFeatures::default(),
            ridge: default_ridge(),
            picard_tol: default_picard_tol(),
            max_picard: default_max_picard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Names of the CSVs to write; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub csv: Vec<String>,
    /// Paths written to `paths.csv`.
    #[serde(default = "default_paths")]
    pub paths: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_paths() -> usize {
    10
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            csv: Vec::new(),
            paths: default_paths(),
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, name: &str) -> bool {
        self.csv.is_empty() || self.csv.iter().any(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Gradient,
    Sufficiency,
    SystemResidual,
    Dependence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub checks: Vec<Check>,
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_gradient_tol")]
    pub gradient_tol: f64,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default = "default_slope_tol")]
    pub slope_tol: f64,
}

fn default_directions() -> usize {
    3
}
fn default_gradient_tol() -> f64 {
    1e-3
}
fn default_residual_tol() -> f64 {
    1e-6
}
fn default_probes() -> usize {
    20
}
fn default_slope() -> f64 {
    2.0
}
fn default_slope_tol() -> f64 {
    0.2
}

impl ExperimentConfig {
    /// Reads, parses and resolves file references relative to the config.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_files(&base)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("cannot echo config: {e}")))
    }

    fn resolve_files(&mut self, base: &Path) -> Result<(), CliError> {
        let mut mats: Vec<&mut MatrixValue> = Vec::new();
        let mut vecs: Vec<&mut VectorValue> = Vec::new();
        if let Some(p) = &mut self.problem {
            mats.extend(
                [
                    &mut p.gram_h,
                    &mut p.gram_v,
                    &mut p.operator,
                    &mut p.drift_state,
                    &mut p.drift_mean,
                    &mut p.diffusion_state,
                    &mut p.diffusion_mean,
                ]
                .into_iter()
                .flatten(),
            );
            vecs.push(&mut p.initial);
            vecs.extend([&mut p.drift_offset, &mut p.diffusion_offset].into_iter().flatten());
        }
        if let Some(b) = &mut self.backward {
            mats.extend(
                [&mut b.driver_y, &mut b.driver_z, &mut b.driver_y_mean, &mut b.driver_z_mean, &mut b.terminal_state]
                    .into_iter()
                    .flatten(),
            );
            vecs.extend([&mut b.driver_offset, &mut b.terminal_brownian, &mut b.terminal_offset].into_iter().flatten());
        }
        if let Some(l) = &mut self.lq {
            mats.extend(
                [
                    &mut l.b1, &mut l.b2, &mut l.c, &mut l.d1, &mut l.d2, &mut l.f, &mut l.g1, &mut l.g2, &mut l.n,
                    &mut l.phi1, &mut l.phi2,
                ]
                .into_iter()
                .flatten(),
            );
        }
        if let Some(s) = &mut self.study {
            vecs.extend(s.direction.as_mut());
        }
        let fix = |file: &mut PathBuf| -> Result<(), CliError> {
            let full = if file.is_absolute() { file.clone() } else { base.join(&*file) };
            if !full.is_file() {
                return Err(CliError::Validation(format!("referenced file {} does not exist", full.display())));
            }
            *file = full;
            Ok(())
        };
        for m in mats {
            if let MatrixValue::File { file } = m {
                fix(file)?;
            }
        }
        for v in vecs {
            if let VectorValue::File { file } = v {
                fix(file)?;
            }
        }
        Ok(())
    }
}

fn read_table(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

fn from_rows(rows: &[Vec<f64>], rows_expected: usize, cols_expected: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != rows_expected || rows.iter().any(|r| r.len() != cols_expected) {
        return Err(CliError::Validation(format!(
            "{what} must be {rows_expected}x{cols_expected}"
        )));
    }
    Ok(DMatrix::from_fn(rows_expected, cols_expected, |i, j| rows[i][j]))
}

impl MatrixValue {
    /// Resolves to an `rows × cols` matrix; a scalar needs a square shape
    /// unless it is zero.
    pub fn resolve(&self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
        match self {
            Self::Scalar(s) if *s == 0.0 => Ok(DMatrix::zeros(rows, cols)),
            Self::Scalar(s) if rows == cols => Ok(DMatrix::identity(rows, cols) * *s),
            Self::Scalar(_) => Err(CliError::Validation(format!(
                "{what}: a scalar only describes square matrices ({rows}x{cols} needed)"
            ))),
            Self::Rows(r) => from_rows(r, rows, cols, what),
            Self::File { file } => from_rows(&read_table(file)?, rows, cols, what),
        }
    }
}

pub fn matrix_or(value: &Option<MatrixValue>, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    match value {
        Some(v) => v.resolve(rows, cols, what),
        None => Ok(DMatrix::zeros(rows, cols)),
    }
}

impl VectorValue {
    pub fn resolve(&self, len: usize, what: &str) -> Result<DVector<f64>, CliError> {
        let values = match self {
            Self::Scalar(s) => return Ok(DVector::from_element(len, *s)),
            Self::List(v) => v.clone(),
            Self::File { file } => read_table(file)?.into_iter().flatten().collect(),
        };
        if values.len() != len {
            return Err(CliError::Validation(format!("{what} must have {len} entries (got {})", values.len())));
        }
        Ok(DVector::from_vec(values))
    }
}

pub fn vector_or(value: &Option<VectorValue>, len: usize, what: &str) -> Result<DVector<f64>, CliError> {
    match value {
        Some(v) => v.resolve(len, what),
        None => Ok(DVector::zeros(len)),
    }
}
