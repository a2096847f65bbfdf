//! Turns configuration sections into solver inputs.

use mfspde::backward::BackwardProblem;
use mfspde::cauchy::{CauchySpec, Profile};
use mfspde::coeffs::{BackwardDriver, LinearDriver, LqCoeffs, MeanFieldMap, NodeTable};
use mfspde::forward::{ForwardProblem, MeanFieldForm};
use mfspde::lq::{FixedPointOptions, LqProblem};
use mfspde::regression::{FeatureSource, RegressionBasis};
use mfspde::triple::{DiscreteTriple, OperatorProcess, TimeGrid};
use mfspde::DMatrix;

use crate::config::{
    matrix_or, vector_or, BasisFeatures, ExperimentConfig, FormConfig, ProblemConfig, ProfileConfig, SolverConfig,
};
use crate::error::CliError;

fn missing(section: &str) -> CliError {
    CliError::Validation(format!("this experiment needs a [{section}] section"))
}

pub fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    if cfg.grid.particles == 0 {
        return Err(CliError::Validation("grid.particles must be at least 1".into()));
    }
    Ok(TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?)
}

pub fn problem_section(cfg: &ExperimentConfig) -> Result<&ProblemConfig, CliError> {
    cfg.problem.as_ref().ok_or_else(|| missing("problem"))
}

pub fn triple_and_operator(p: &ProblemConfig) -> Result<(DiscreteTriple, OperatorProcess), CliError> {
    let n = p.dim;
    if n == 0 {
        return Err(CliError::Validation("problem.dim must be at least 1".into()));
    }
    let gram_h = match &p.gram_h {
        Some(m) => m.resolve(n, n, "gram_h")?,
        None => DMatrix::identity(n, n),
    };
    let gram_v = match &p.gram_v {
        Some(m) => m.resolve(n, n, "gram_v")?,
        None => gram_h.clone(),
    };
    let triple = DiscreteTriple::new(gram_h, gram_v)?;
    let a = matrix_or(&p.operator, n, n, "operator")?;
    let operator = OperatorProcess::constant(&triple, a, p.alpha)?;
    Ok((triple, operator))
}

pub fn forward_problem(cfg: &ExperimentConfig) -> Result<ForwardProblem, CliError> {
    let p = problem_section(cfg)?;
    let (triple, operator) = triple_and_operator(p)?;
    let n = p.dim;
    let drift = MeanFieldMap::affine(
        matrix_or(&p.drift_state, n, n, "drift_state")?,
        matrix_or(&p.drift_mean, n, n, "drift_mean")?,
        vector_or(&p.drift_offset, n, "drift_offset")?,
    )?;
    let diffusion = MeanFieldMap::affine(
        matrix_or(&p.diffusion_state, n, n, "diffusion_state")?,
        matrix_or(&p.diffusion_mean, n, n, "diffusion_mean")?,
        vector_or(&p.diffusion_offset, n, "diffusion_offset")?,
    )?;
    let form = match p.form {
        FormConfig::EnsembleMean => MeanFieldForm::EnsembleMean,
        FormConfig::IndependentCopy => MeanFieldForm::IndependentCopy,
    };
    Ok(ForwardProblem::new(triple, operator, drift, diffusion, form, p.initial.resolve(n, "initial")?)?)
}

pub fn backward_problem(cfg: &ExperimentConfig, forward: &ForwardProblem) -> Result<BackwardProblem, CliError> {
    let b = cfg.backward.as_ref().ok_or_else(|| missing("backward"))?;
    let n = forward.dim();
    let driver = BackwardDriver::linear(LinearDriver {
        on_y_mean: matrix_or(&b.driver_y_mean, n, n, "driver_y_mean")?,
        on_z_mean: matrix_or(&b.driver_z_mean, n, n, "driver_z_mean")?,
        on_y: matrix_or(&b.driver_y, n, n, "driver_y")?,
        on_z: matrix_or(&b.driver_z, n, n, "driver_z")?,
        offset: vector_or(&b.driver_offset, n, "driver_offset")?,
    })?;
    let on_state = matrix_or(&b.terminal_state, n, n, "terminal_state")?;
    let on_brownian = vector_or(&b.terminal_brownian, n, "terminal_brownian")?;
    let offset = vector_or(&b.terminal_offset, n, "terminal_offset")?;
    Ok(BackwardProblem::new(
        forward.triple.clone(),
        forward.operator.clone(),
        driver,
        move |path| &on_state * path.terminal_state() + &on_brownian * path.terminal_brownian() + &offset,
    )?)
}

pub fn lq_problem(cfg: &ExperimentConfig) -> Result<LqProblem, CliError> {
    let p = problem_section(cfg)?;
    let l = cfg.lq.as_ref().ok_or_else(|| missing("lq"))?;
    let (triple, operator) = triple_and_operator(p)?;
    let (n, m) = (p.dim, l.control_dim);
    if m == 0 {
        return Err(CliError::Validation("lq.control_dim must be at least 1".into()));
    }
    let table = |v, r, c, what| -> Result<NodeTable<DMatrix<f64>>, CliError> { Ok(NodeTable::constant(matrix_or(v, r, c, what)?)) };
    let n_cost = match &l.n {
        Some(v) => v.resolve(m, m, "n")?,
        None => DMatrix::identity(m, m),
    };
    let positivity = match l.positivity {
        Some(k) => k,
        None => mfspde::linalg::min_eigenvalue(&mfspde::linalg::symmetric_part(&n_cost)),
    };
    let coeffs = LqCoeffs {
        b1: table(&l.b1, n, n, "b1")?,
        b2: table(&l.b2, n, n, "b2")?,
        c: table(&l.c, n, m, "c")?,
        d1: table(&l.d1, n, n, "d1")?,
        d2: table(&l.d2, n, n, "d2")?,
        f: table(&l.f, n, m, "f")?,
        g1: table(&l.g1, n, n, "g1")?,
        g2: table(&l.g2, n, n, "g2")?,
        n_cost: NodeTable::constant(n_cost),
        phi1: matrix_or(&l.phi1, n, n, "phi1")?,
        phi2: matrix_or(&l.phi2, n, n, "phi2")?,
        positivity,
    };
    let report = coeffs.validate();
    if !report.passed {
        return Err(CliError::Validation(report.messages.join("; ")));
    }
    let problem = LqProblem::new(
        triple,
        operator,
        coeffs,
        p.initial.resolve(n, "initial")?,
        grid(cfg)?,
        cfg.grid.particles,
        cfg.seed,
    )?;
    Ok(problem)
}

fn profile(p: &ProfileConfig) -> Profile {
    match *p {
        ProfileConfig::Constant { value } => Profile::Constant(value),
        ProfileConfig::SinBump { base, amplitude, frequency } => Profile::SinBump { base, amplitude, frequency },
        ProfileConfig::Gaussian { base, amplitude, center, width } => Profile::Gaussian { base, amplitude, center, width },
    }
}

fn profile_or_zero(p: &Option<ProfileConfig>) -> Profile {
    p.as_ref().map_or(Profile::Constant(0.0), profile)
}

pub fn cauchy_spec(cfg: &ExperimentConfig) -> Result<CauchySpec, CliError> {
    let c = cfg.cauchy.as_ref().ok_or_else(|| missing("cauchy"))?;
    Ok(CauchySpec {
        dim: c.dim,
        a: profile(&c.a),
        b: profile_or_zero(&c.b),
        c: profile_or_zero(&c.c),
        eta: profile_or_zero(&c.eta),
        rho: profile_or_zero(&c.rho),
        sigma: profile_or_zero(&c.sigma),
        kappa: c.kappa,
        big_k: c.big_k,
        half_width: c.half_width,
        mesh: c.mesh,
        initial: profile(&c.initial),
        horizon: cfg.grid.horizon,
    })
}

pub fn basis(s: &SolverConfig) -> Result<RegressionBasis, CliError> {
    let source = match s.basis_features {
        BasisFeatures::State => FeatureSource::State,
        BasisFeatures::Brownian => FeatureSource::Brownian,
        BasisFeatures::StateAndBrownian => FeatureSource::StateAndBrownian,
    };
    Ok(RegressionBasis::new(s.basis_degree, s.ridge, source)?)
}

pub fn fixed_point_options(s: &SolverConfig) -> FixedPointOptions {
    FixedPointOptions {
        damping: s.damping,
        tol: s.tol,
        max_iter: s.max_iter,
        deterministic: s.deterministic,
        auto_damping: s.auto_damping,
    }
}
