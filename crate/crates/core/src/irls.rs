//! Fisher-divergence minimization over the Gaussian family by damped
//! iteratively re-weighted least squares.
//!
//! With `q_t` fixed, `∫‖z(θ) − D(θ)u‖² q_t(θ) dθ` is a least-squares problem in
//! `u` whose normal equations are `M_t u = v_t`, with
//! `M_t = E_t[D(θ)ᵀD(θ)]` and `v_t = E_t[D(θ)ᵀ z(θ)]`. Each iteration solves
//! them and blends the solution with the current iterate.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{score as family_score, standard_normals, transform_normals, MomentParam, NaturalParam, StatLayout};
use crate::integrate::{gh_expectation, gh_expectation_vec, mc_over_draws, IntegratorConfig, IntegratorMethod, TaylorTerms};
use crate::linalg::{cholesky_lower, cholesky_solve, max_abs_diff};
use crate::targets::{Dataset, TargetModel};

/// Maximum number of times the damping factor is halved after a step that
/// leaves the positive-definite cone.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assembly {
    /// `v_t` from the target's score, integrated as the integrator config says.
    #[serde(rename = "generic_mc", alias = "generic")]
    Generic,
    /// Closed-form logistic `v_t` with Taylor-approximated expectations.
    LogisticTaylor,
    /// Closed-form logistic `v_t` with Monte Carlo expectations.
    LogisticMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub integrator: IntegratorConfig,
    pub assembly: Assembly,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rho: 0.5, max_iter: 500, tol: 1e-6, integrator: IntegratorConfig::default(), assembly: Assembly::Generic }
    }
}

impl SolverConfig {
    pub fn quadrature() -> Self {
        Self { integrator: IntegratorConfig::quadrature(64), ..Self::default() }
    }

    pub fn exact() -> Self {
        Self { integrator: IntegratorConfig::exact(), ..Self::default() }
    }

    pub fn logistic_taylor() -> Self {
        Self { assembly: Assembly::LogisticTaylor, integrator: IntegratorConfig::taylor(), ..Self::default() }
    }

    pub fn logistic_mc(n_samples: usize, seed: u64) -> Self {
        Self { assembly: Assembly::LogisticMc, integrator: IntegratorConfig::monte_carlo(n_samples, seed), ..Self::default() }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!("rho = {} must lie in (0, 1]", self.rho)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol = {} must be positive", self.tol)));
        }
        match self.assembly {
            Assembly::Generic => {
                if self.integrator.method == IntegratorMethod::Taylor {
                    return Err(Error::InvalidConfig("the Taylor rule only applies to logistic assembly".into()));
                }
            }
            Assembly::LogisticTaylor | Assembly::LogisticMc => {}
        }
        self.integrator.validate(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub delta_inf: f64,
    /// Damping actually applied after any halvings.
    pub rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip)]
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub psi_star: NaturalParam,
    pub moment: MomentParam,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    pub wall_time: f64,
}

/// JSON form of a [`FitReport`]; `sigma` is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReportRecord {
    pub psi_star: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    pub wall_time_s: f64,
}

impl From<&FitReport> for FitReportRecord {
    fn from(r: &FitReport) -> Self {
        let m = crate::expfam::MomentRecord::from(&r.moment);
        Self {
            psi_star: r.psi_star.as_vector().iter().copied().collect(),
            mu: m.mu,
            sigma: m.sigma,
            iterations: r.iterations,
            converged: r.converged,
            trace: r.trace.clone(),
            wall_time_s: r.wall_time,
        }
    }
}

/// An estimate together with its Monte Carlo standard error (zero for
/// deterministic rules).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub std_err: f64,
}

fn second_moment(p: &MomentParam) -> DMatrix<f64> {
    p.cov() + p.mean() * p.mean().transpose()
}

/// `E[t_a t_b]` where each factor is `θ_var` or the constant 1.
fn moment_of(mu: &DVector<f64>, s2: &DMatrix<f64>, a: Option<usize>, b: Option<usize>) -> f64 {
    match (a, b) {
        (None, None) => 1.0,
        (Some(p), None) | (None, Some(p)) => mu[p],
        (Some(p), Some(q)) => s2[(p, q)],
    }
}

/// `M_t = E[D(θ)ᵀ D(θ)]` in closed form. `D` is affine in `θ`, so only first
/// and second moments of `q_t` enter.
pub fn assemble_mt(psi: &NaturalParam) -> Result<DMatrix<f64>> {
    Ok(assemble_mt_moment(&psi.to_moment()?))
}

pub fn assemble_mt_moment(p: &MomentParam) -> DMatrix<f64> {
    let d = p.dim();
    let layout = StatLayout::new(d);
    let mu = p.mean();
    let s2 = second_moment(p);
    // entries of D grouped by row
    let mut by_row: Vec<Vec<(usize, f64, Option<usize>)>> = vec![Vec::new(); d];
    for (col, entries) in layout.jacobian_columns().into_iter().enumerate() {
        for e in entries {
            by_row[e.row].push((col, e.coef, e.var));
        }
    }
    let m = layout.len();
    let mut out = DMatrix::zeros(m, m);
    for row in &by_row {
        for &(a, ca, va) in row {
            for &(b, cb, vb) in row {
                out[(a, b)] += ca * cb * moment_of(mu, &s2, va, vb);
            }
        }
    }
    out
}

/// `D(θ)ᵀ w` without forming `D`.
pub(crate) fn jacobian_transpose_mul(layout: &StatLayout, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let d = layout.dim();
    let mut out = DVector::zeros(layout.len());
    for (idx, (j, l)) in layout.quad_pairs().into_iter().enumerate() {
        out[idx] = if j == l { 2.0 * theta[j] * w[j] } else { theta[l] * w[j] + theta[j] * w[l] };
    }
    out.rows_mut(layout.quad_len(), d).copy_from(w);
    out
}

fn check_dims(psi: &NaturalParam, target: &dyn TargetModel) -> Result<()> {
    if psi.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), found: psi.dim() });
    }
    Ok(())
}

/// `v_t = E[D(θ)ᵀ ∇log π̃(θ)]` with closed-form Gaussian moments; needs an
/// affine score.
fn generic_rhs_exact(p: &MomentParam, target: &dyn TargetModel) -> Result<DVector<f64>> {
    let (a, b) = target
        .affine_score()
        .ok_or_else(|| Error::InvalidConfig("exact integration needs a target with affine score".into()))?;
    let d = p.dim();
    let layout = StatLayout::new(d);
    let mu = p.mean();
    let s2 = second_moment(p);
    let mut v = DVector::zeros(layout.len());
    for (col, entries) in layout.jacobian_columns().into_iter().enumerate() {
        let mut acc = 0.0;
        for e in entries {
            // E[t · z_row] with z_row = Σ_q A[row, q] θ_q + b[row]
            let mut ez = b[e.row] * moment_of(mu, &s2, e.var, None);
            for q in 0..d {
                ez += a[(e.row, q)] * moment_of(mu, &s2, e.var, Some(q));
            }
            acc += e.coef * ez;
        }
        v[col] = acc;
    }
    Ok(v)
}

fn generic_rhs_quadrature(p: &MomentParam, target: &dyn TargetModel, n_nodes: usize) -> Result<DVector<f64>> {
    let layout = StatLayout::new(1);
    gh_expectation_vec(
        |t| {
            let theta = DVector::from_element(1, t);
            jacobian_transpose_mul(&layout, &theta, &target.score(&theta))
        },
        p.mean()[0],
        p.cov()[(0, 0)],
        n_nodes,
    )
}

fn generic_rhs_draws(target: &dyn TargetModel, draws: &DMatrix<f64>) -> Result<crate::integrate::McEstimate> {
    let layout = StatLayout::new(draws.ncols());
    mc_over_draws(|theta| jacobian_transpose_mul(&layout, theta, &target.score(theta)), draws)
}

/// Generic `v_t` with per-entry standard errors (zero for deterministic rules).
pub fn assemble_vt_generic_with_error(
    psi: &NaturalParam,
    target: &dyn TargetModel,
    cfg: &IntegratorConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dims(psi, target)?;
    cfg.validate(psi.dim())?;
    let p = psi.to_moment()?;
    match cfg.method {
        IntegratorMethod::Quadrature => {
            let v = generic_rhs_quadrature(&p, target, cfg.n_nodes)?;
            let zeros = DVector::zeros(v.len());
            Ok((v, zeros))
        }
        IntegratorMethod::Exact => {
            let v = generic_rhs_exact(&p, target)?;
            let zeros = DVector::zeros(v.len());
            Ok((v, zeros))
        }
        IntegratorMethod::MonteCarlo => {
            let draws = transform_normals(&standard_normals(cfg.seed, cfg.n_samples, p.dim()), &p);
            let est = generic_rhs_draws(target, &draws)?;
            Ok((est.mean, est.std_err))
        }
        IntegratorMethod::Taylor => Err(Error::InvalidConfig("the Taylor rule only applies to logistic assembly".into())),
    }
}

pub fn assemble_vt_generic(psi: &NaturalParam, target: &dyn TargetModel, cfg: &IntegratorConfig) -> Result<DVector<f64>> {
    assemble_vt_generic_with_error(psi, target, cfg).map(|(v, _)| v)
}

/// How the logistic expectations `E{1/(1+exp(x_iᵀθ))}` and
/// `E{θ_j/(1+exp(x_iᵀθ))}` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogisticMethod {
    Taylor,
    MonteCarlo { n_samples: usize, seed: u64 },
}

/// Per-observation expectations: `sigmoid[i]` and `fij[(i, j)]`.
struct LogisticExpectations {
    sigmoid: DVector<f64>,
    fij: DMatrix<f64>,
}

fn logistic_expectations_taylor(p: &MomentParam, data: &Dataset) -> LogisticExpectations {
    let (n, d) = (data.n(), data.dim());
    let mut sigmoid = DVector::zeros(n);
    let mut fij = DMatrix::zeros(n, d);
    let mu = p.mean();
    for i in 0..n {
        let x = data.x().row(i).transpose();
        let sx = p.cov() * &x;
        let terms = TaylorTerms::new(&x, &sx, mu);
        sigmoid[i] = terms.sigmoid();
        for j in 0..d {
            fij[(i, j)] = terms.fij(j, mu, &sx);
        }
    }
    LogisticExpectations { sigmoid, fij }
}

fn logistic_expectations_draws(data: &Dataset, draws: &DMatrix<f64>) -> Result<LogisticExpectations> {
    let s = draws.nrows() as f64;
    // weights[k, i] = 1 / (1 + exp(x_iᵀθ_k))
    let eta = draws * data.x().transpose();
    let weights = eta.map(|u| crate::targets::logistic(-u));
    let sigmoid = weights.row_mean().transpose();
    let fij = weights.transpose() * draws / s;
    if fij.iter().chain(sigmoid.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "logistic expectations".into() });
    }
    Ok(LogisticExpectations { sigmoid, fij })
}

/// Logistic-regression `v_t` in closed form given the expectations.
///
/// Quadratic entry for the pair `(j, l)`:
/// `Σ_i [(y_i−1)(μ_l x_ij + μ_j x_il) + x_ij E f_il + x_il E f_ij] − 2(μ_jμ_l + Σ_jl)/τ²`.
/// Linear entry `j`: `Σ_i (y_i − 1 + E σ_i) x_ij − μ_j/τ²`.
fn logistic_rhs(p: &MomentParam, data: &Dataset, ex: &LogisticExpectations) -> DVector<f64> {
    let d = p.dim();
    let layout = StatLayout::new(d);
    let x = data.x();
    let mu = p.mean();
    let s2 = second_moment(p);
    let inv_tau2 = 1.0 / data.tau2();
    let ym1 = data.y().map(|y| y - 1.0);
    // Σ_i (y_i − 1) x_ij and Σ_i x_ij E f_il
    let xy = x.tr_mul(&ym1);
    let cross = x.tr_mul(&ex.fij);
    let mut v = DVector::zeros(layout.len());
    for (idx, (j, l)) in layout.quad_pairs().into_iter().enumerate() {
        v[idx] = mu[l] * xy[j] + mu[j] * xy[l] + cross[(j, l)] + cross[(l, j)] - 2.0 * s2[(j, l)] * inv_tau2;
    }
    let lin = x.tr_mul(&(ym1 + &ex.sigmoid));
    for j in 0..d {
        v[layout.linear_index(j)] = lin[j] - mu[j] * inv_tau2;
    }
    v
}

pub fn assemble_vt_logistic(psi: &NaturalParam, data: &Dataset, method: LogisticMethod) -> Result<DVector<f64>> {
    if psi.dim() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), found: psi.dim() });
    }
    let p = psi.to_moment()?;
    let ex = match method {
        LogisticMethod::Taylor => logistic_expectations_taylor(&p, data),
        LogisticMethod::MonteCarlo { n_samples, seed } => {
            let draws = transform_normals(&standard_normals(seed, n_samples, p.dim()), &p);
            logistic_expectations_draws(data, &draws)?
        }
    };
    let v = logistic_rhs(&p, data, &ex);
    if v.len() != psi.layout().len() {
        return Err(Error::DimensionMismatch { expected: psi.layout().len(), found: v.len() });
    }
    Ok(v)
}

/// `ρ M⁻¹v + (1−ρ) ψ_t`, solving with a Cholesky factorization of `M` after a
/// small diagonal ridge.
pub fn irls_step(psi_t: &NaturalParam, v: &DVector<f64>, m: &DMatrix<f64>, rho: f64) -> Result<NaturalParam> {
    irls_step_at(psi_t, v, m, rho, 0)
}

fn irls_step_at(psi_t: &NaturalParam, v: &DVector<f64>, m: &DMatrix<f64>, rho: f64, iteration: usize) -> Result<NaturalParam> {
    let solution = solve_normal_equations(v, m, iteration)?;
    let blended = solution * rho + psi_t.as_vector() * (1.0 - rho);
    NaturalParam::from_vector(blended)
}

fn solve_normal_equations(v: &DVector<f64>, m: &DMatrix<f64>, iteration: usize) -> Result<DVector<f64>> {
    let diag_max = m.diagonal().abs().max();
    let ridge = 1e-10 * (1.0 + diag_max);
    let mut reg = m.clone();
    for k in 0..reg.nrows() {
        reg[(k, k)] += ridge;
    }
    let l = cholesky_lower(&reg).map_err(|_| Error::SolverFailure {
        iteration,
        reason: "normal matrix is singular after regularization".into(),
    })?;
    let x = cholesky_solve(&l, v);
    if x.iter().any(|t| !t.is_finite()) {
        return Err(Error::SolverFailure { iteration, reason: "non-finite least-squares solution".into() });
    }
    Ok(x)
}

fn affine_divergence(p: &MomentParam, target: &dyn TargetModel) -> Result<f64> {
    let (a, b) = target
        .affine_score()
        .ok_or_else(|| Error::InvalidConfig("exact integration needs a target with affine score".into()))?;
    // residual z − ∇log q = (A + Ω) θ + (b − Ωμ)
    let omega = crate::linalg::cholesky_inverse(&p.cholesky());
    let slope = &a + &omega;
    let offset = &b - &omega * p.mean();
    let at_mean = &slope * p.mean() + offset;
    Ok(at_mean.norm_squared() + (&slope * p.cov() * slope.transpose()).trace())
}

fn squared_residual(target: &dyn TargetModel, psi: &NaturalParam, theta: &DVector<f64>) -> f64 {
    (target.score(theta) - family_score(theta, psi)).norm_squared()
}

/// `E_q‖z(θ) − D(θ)ψ‖²`, the reduced form of the Fisher divergence.
pub fn fisher_divergence(psi: &NaturalParam, target: &dyn TargetModel, cfg: &IntegratorConfig) -> Result<DivergenceEstimate> {
    check_dims(psi, target)?;
    cfg.validate(psi.dim())?;
    let p = psi.to_moment()?;
    match cfg.method {
        IntegratorMethod::Quadrature => {
            let value = gh_expectation(
                |t| squared_residual(target, psi, &DVector::from_element(1, t)),
                p.mean()[0],
                p.cov()[(0, 0)],
                cfg.n_nodes,
            )?;
            Ok(DivergenceEstimate { value, std_err: 0.0 })
        }
        IntegratorMethod::Exact => Ok(DivergenceEstimate { value: affine_divergence(&p, target)?, std_err: 0.0 }),
        IntegratorMethod::MonteCarlo => {
            let draws = transform_normals(&standard_normals(cfg.seed, cfg.n_samples, p.dim()), &p);
            divergence_over_draws(psi, target, &draws)
        }
        IntegratorMethod::Taylor => Err(Error::InvalidConfig("the Taylor rule does not apply to the divergence".into())),
    }
}

fn divergence_over_draws(psi: &NaturalParam, target: &dyn TargetModel, draws: &DMatrix<f64>) -> Result<DivergenceEstimate> {
    let est = mc_over_draws(|t| DVector::from_element(1, squared_residual(target, psi, t)), draws)?;
    Ok(DivergenceEstimate { value: est.mean[0], std_err: est.std_err[0] })
}

/// `E_q‖∇log q(θ) − ∇log π̃(θ)‖²` with the approximating score taken from the
/// mean/covariance form, `−Σ⁻¹(θ − μ)`. Algebraically equal to
/// [`fisher_divergence`].
pub fn fisher_divergence_direct(psi: &NaturalParam, target: &dyn TargetModel, cfg: &IntegratorConfig) -> Result<DivergenceEstimate> {
    check_dims(psi, target)?;
    cfg.validate(psi.dim())?;
    let p = psi.to_moment()?;
    let omega = crate::linalg::cholesky_inverse(&p.cholesky());
    let integrand = |theta: &DVector<f64>| {
        let q_score = -(&omega * (theta - p.mean()));
        (q_score - target.score(theta)).norm_squared()
    };
    match cfg.method {
        IntegratorMethod::Quadrature => {
            let value = gh_expectation(|t| integrand(&DVector::from_element(1, t)), p.mean()[0], p.cov()[(0, 0)], cfg.n_nodes)?;
            Ok(DivergenceEstimate { value, std_err: 0.0 })
        }
        IntegratorMethod::Exact => Ok(DivergenceEstimate { value: affine_divergence(&p, target)?, std_err: 0.0 }),
        IntegratorMethod::MonteCarlo => {
            let draws = transform_normals(&standard_normals(cfg.seed, cfg.n_samples, p.dim()), &p);
            let est = mc_over_draws(|t| DVector::from_element(1, integrand(t)), &draws)?;
            Ok(DivergenceEstimate { value: est.mean[0], std_err: est.std_err[0] })
        }
        IntegratorMethod::Taylor => Err(Error::InvalidConfig("the Taylor rule does not apply to the divergence".into())),
    }
}

/// Right-hand-side evaluator for one fit, holding the common random numbers.
struct RhsEngine<'a> {
    target: &'a dyn TargetModel,
    cfg: SolverConfig,
    base: Option<DMatrix<f64>>,
}

impl<'a> RhsEngine<'a> {
    fn new(target: &'a dyn TargetModel, cfg: SolverConfig) -> Result<Self> {
        let d = target.dim();
        let needs_draws = cfg.integrator.method == IntegratorMethod::MonteCarlo || cfg.assembly != Assembly::Generic;
        let base = needs_draws.then(|| standard_normals(cfg.integrator.seed, cfg.integrator.n_samples, d));
        if cfg.assembly != Assembly::Generic && target.as_logistic().is_none() {
            return Err(Error::InvalidConfig("logistic assembly needs a logistic-regression target".into()));
        }
        Ok(Self { target, cfg, base })
    }

    fn draws(&self, p: &MomentParam) -> DMatrix<f64> {
        transform_normals(self.base.as_ref().expect("draws allocated for Monte Carlo"), p)
    }

    fn rhs(&self, p: &MomentParam) -> Result<DVector<f64>> {
        match self.cfg.assembly {
            Assembly::LogisticTaylor => {
                let data = self.target.as_logistic().expect("checked in new").data();
                Ok(logistic_rhs(p, data, &logistic_expectations_taylor(p, data)))
            }
            Assembly::LogisticMc => {
                let data = self.target.as_logistic().expect("checked in new").data();
                let ex = logistic_expectations_draws(data, &self.draws(p))?;
                Ok(logistic_rhs(p, data, &ex))
            }
            Assembly::Generic => match self.cfg.integrator.method {
                IntegratorMethod::Quadrature => generic_rhs_quadrature(p, self.target, self.cfg.integrator.n_nodes),
                IntegratorMethod::Exact => generic_rhs_exact(p, self.target),
                IntegratorMethod::MonteCarlo => Ok(generic_rhs_draws(self.target, &self.draws(p))?.mean),
                IntegratorMethod::Taylor => unreachable!("rejected by validate"),
            },
        }
    }

    /// Objective at `psi`; `None` on iterations where it is skipped.
    fn objective(&self, iter: usize, psi: &NaturalParam, p: &MomentParam) -> Option<f64> {
        match self.cfg.integrator.method {
            IntegratorMethod::Quadrature => {
                fisher_divergence(psi, self.target, &self.cfg.integrator).ok().map(|e| e.value)
            }
            IntegratorMethod::Exact => affine_divergence(p, self.target).ok(),
            IntegratorMethod::MonteCarlo | IntegratorMethod::Taylor => {
                if iter % 10 != 0 {
                    return None;
                }
                let draws = match &self.base {
                    Some(_) => self.draws(p),
                    None => return None,
                };
                divergence_over_draws(psi, self.target, &draws).ok().map(|e| e.value)
            }
        }
    }
}

/// Runs damped IRLS from `init` until `‖ψ_{t+1} − ψ_t‖∞ ≤ tol` or
/// `max_iter` steps.
///
/// A step whose precision is not positive definite is retried with the
/// damping halved, up to [`MAX_HALVINGS`] times.
pub fn fit(target: &dyn TargetModel, init: &NaturalParam, cfg: &SolverConfig) -> Result<FitReport> {
    let start = Instant::now();
    check_dims(init, target)?;
    cfg.validate(target.dim())?;
    let engine = RhsEngine::new(target, *cfg)?;

    let mut psi = init.clone();
    let mut moment = psi.to_moment()?;
    let mut trace = Vec::new();
    let mut converged = false;

    for iter in 0..cfg.max_iter {
        let m = assemble_mt_moment(&moment);
        let v = engine.rhs(&moment)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::SolverFailure { iteration: iter, reason: "non-finite right-hand side".into() });
        }
        let solution = solve_normal_equations(&v, &m, iter)?;

        let mut rho = cfg.rho;
        let mut halvings = 0;
        let (next, next_moment) = loop {
            let blended = &solution * rho + psi.as_vector() * (1.0 - rho);
            let candidate = NaturalParam::from_vector(blended)?;
            match candidate.to_moment() {
                Ok(mm) => break (candidate, mm),
                Err(_) if halvings < MAX_HALVINGS => {
                    rho *= 0.5;
                    halvings += 1;
                }
                Err(_) => {
                    return Err(Error::SolverFailure {
                        iteration: iter,
                        reason: format!("update left the positive-definite cone after {MAX_HALVINGS} halvings"),
                    })
                }
            }
        };

        let delta = max_abs_diff(next.as_vector(), psi.as_vector());
        if !delta.is_finite() {
            return Err(Error::SolverFailure { iteration: iter, reason: "non-finite parameter change".into() });
        }
        let objective = engine.objective(iter, &next, &next_moment);
        trace.push(TraceEntry { iter, delta_inf: delta, rho, objective, psi: next.as_vector().iter().copied().collect() });
        psi = next;
        moment = next_moment;
        if delta <= cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(FitReport {
        iterations: trace.len(),
        psi_star: psi,
        moment,
        converged,
        trace,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// `‖M(ψ)ψ − v(ψ)‖∞`, the normal-equation residual at `psi`.
pub fn normal_equations_residual(psi: &NaturalParam, target: &dyn TargetModel, cfg: &SolverConfig) -> Result<f64> {
    let p = psi.to_moment()?;
    let engine = RhsEngine::new(target, *cfg)?;
    let v = engine.rhs(&p)?;
    let m = assemble_mt_moment(&p);
    Ok(max_abs_diff(&(m * psi.as_vector()), &v))
}

/// One update of the fixed-variance normal-mean family `N(ψ, σ²)`:
/// `ψ + σ² E_{N(ψ,σ²)}[∇log π̃(θ)]`, by 64-node quadrature.
pub fn normal_mean_update(psi_t: f64, sigma2: f64, target: &dyn TargetModel) -> Result<f64> {
    if target.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, found: target.dim() });
    }
    let mean_score = gh_expectation(|t| target.score(&DVector::from_element(1, t))[0], psi_t, sigma2, 64)?;
    Ok(psi_t + sigma2 * mean_score)
}

/// Iterates [`normal_mean_update`] until successive means differ by at most
/// `tol`. Returns the final mean and the number of updates.
pub fn normal_mean_fit(init: f64, sigma2: f64, target: &dyn TargetModel, tol: f64, max_iter: usize) -> Result<(f64, usize)> {
    let mut psi = init;
    for iter in 1..=max_iter {
        let next = normal_mean_update(psi, sigma2, target)?;
        let delta = (next - psi).abs();
        psi = next;
        if delta <= tol {
            return Ok((psi, iter));
        }
    }
    Err(Error::SolverFailure { iteration: max_iter, reason: "normal-mean iteration did not settle".into() })
}

/// Starting point: the prior for logistic targets, a grid mode with unit
/// variance for one-dimensional targets, the standard normal otherwise.
pub fn default_init(target: &dyn TargetModel) -> Result<NaturalParam> {
    let d = target.dim();
    let p = if let Some(logit) = target.as_logistic() {
        MomentParam::new(DVector::zeros(d), DMatrix::identity(d, d) * logit.data().tau2())?
    } else if d == 1 {
        MomentParam::new(DVector::from_element(1, grid_mode(target, -5.0, 5.0, 1e-3)), DMatrix::identity(1, 1))?
    } else {
        MomentParam::new(DVector::zeros(d), DMatrix::identity(d, d))?
    };
    Ok(p.to_natural())
}

/// Argmax of the log density on `lo, lo + step, …, hi`; the first maximizer
/// wins ties.
pub fn grid_mode(target: &dyn TargetModel, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    let mut best = (lo, f64::NEG_INFINITY);
    for k in 0..=n {
        let t = lo + k as f64 * step;
        let v = target.log_unnorm(&DVector::from_element(1, t));
        if v > best.1 {
            best = (t, v);
        }
    }
    best.0
}

/// `(iteration, objective)` for the trace entries that recorded one.
pub fn trace_objectives(report: &FitReport) -> Vec<(usize, f64)> {
    report.trace.iter().filter_map(|e| e.objective.map(|o| (e.iter, o))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::stat_jacobian;
    use crate::targets::{logistic_target, GaussianTarget, Target1D};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal_1d(mean: f64, var: f64) -> MomentParam {
        MomentParam::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn random_moment(d: usize, rng: &mut ChaCha8Rng, scale: f64) -> MomentParam {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = (&a * a.transpose() + DMatrix::identity(d, d) * 0.3) * scale;
        let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
        MomentParam::new(mu, sigma).unwrap()
    }

    fn random_dataset(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        let y = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        Dataset::new(x, y, 5.0).unwrap()
    }

    #[test]
    fn mt_closed_form_examples() {
        let m = assemble_mt(&normal_1d(0.0, 1.0).to_natural()).unwrap();
        assert!((m - DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0])).abs().max() < 1e-14);
        let m = assemble_mt(&normal_1d(1.0, 1.0).to_natural()).unwrap();
        assert!((m - DMatrix::from_row_slice(2, 2, &[8.0, 2.0, 2.0, 1.0])).abs().max() < 1e-13);
    }

    #[test]
    fn mt_matches_monte_carlo_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for d in [2, 3] {
            let p = random_moment(d, &mut rng, 0.5);
            let psi = p.to_natural();
            let m = assemble_mt(&psi).unwrap();
            let mm = m.nrows();
            let est = crate::integrate::mc_expectation(
                |t| {
                    let jac = stat_jacobian(t);
                    let dtd = jac.transpose() * jac;
                    DVector::from_column_slice(dtd.as_slice())
                },
                &psi,
                &IntegratorConfig::monte_carlo(1_000_000, 5),
            )
            .unwrap();
            for k in 0..mm * mm {
                let (r, c) = (k % mm, k / mm);
                let tol = 4.0 * est.std_err[k] + 1e-12;
                assert!((m[(r, c)] - est.mean[k]).abs() <= tol, "d={d} ({r},{c}): {} vs {}", m[(r, c)], est.mean[k]);
            }
            assert!((&m - m.transpose()).abs().max() == 0.0);
            assert!(m.clone().symmetric_eigenvalues().min() > -1e-10);
        }
    }

    #[test]
    fn vt_generic_one_dimensional_example() {
        let psi = normal_1d(0.0, 1.0).to_natural();
        let target = Target1D::Normal { mean: 1.0, sd: 1.0 };
        let v = assemble_vt_generic(&psi, &target, &IntegratorConfig::quadrature(64)).unwrap();
        assert_abs_diff_eq!(v[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
        let v_exact = assemble_vt_generic(&psi, &target, &IntegratorConfig::exact()).unwrap();
        assert!((v - v_exact).abs().max() < 1e-12);
    }

    #[test]
    fn vt_generic_at_matching_gaussian_satisfies_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_moment(3, &mut rng, 1.0);
        let psi = p.to_natural();
        let target = GaussianTarget::new(&p);
        let m = assemble_mt(&psi).unwrap();
        let v = assemble_vt_generic(&psi, &target, &IntegratorConfig::exact()).unwrap();
        assert!((&m * psi.as_vector() - &v).abs().max() < 1e-10);
        let (v_mc, se) = assemble_vt_generic_with_error(&psi, &target, &IntegratorConfig::monte_carlo(200_000, 4)).unwrap();
        let mpsi = &m * psi.as_vector();
        for k in 0..v.len() {
            assert!((v_mc[k] - mpsi[k]).abs() <= 4.0 * se[k] + 1e-9, "entry {k}");
        }
    }

    #[test]
    fn vt_generic_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_dataset(20, 2, &mut rng);
        let target = logistic_target(data);
        let psi = random_moment(2, &mut rng, 0.3).to_natural();
        let cfg = IntegratorConfig::monte_carlo(500, 17);
        assert_eq!(assemble_vt_generic(&psi, &target, &cfg).unwrap(), assemble_vt_generic(&psi, &target, &cfg).unwrap());
    }

    #[test]
    fn vt_logistic_mc_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let data = random_dataset(20, 3, &mut rng);
            let psi = random_moment(3, &mut rng, 0.3).to_natural();
            let seed = rng.random();
            let (generic, se) =
                assemble_vt_generic_with_error(&psi, &logistic_target(data.clone()), &IntegratorConfig::monte_carlo(20_000, seed)).unwrap();
            let closed = assemble_vt_logistic(&psi, &data, LogisticMethod::MonteCarlo { n_samples: 20_000, seed }).unwrap();
            for k in 0..generic.len() {
                assert!((generic[k] - closed[k]).abs() <= 4.0 * se[k], "entry {k}: {} vs {}", generic[k], closed[k]);
            }
        }
    }

    #[test]
    fn vt_logistic_zero_covariates_reduce_to_prior_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data = Dataset::new(DMatrix::zeros(6, 3), vec![0, 1, 1, 0, 1, 0], 5.0).unwrap();
        let p = random_moment(3, &mut rng, 0.5);
        let s2 = p.cov() + p.mean() * p.mean().transpose();
        let layout = StatLayout::new(3);
        for method in [LogisticMethod::Taylor, LogisticMethod::MonteCarlo { n_samples: 1000, seed: 1 }] {
            let v = assemble_vt_logistic(&p.to_natural(), &data, method).unwrap();
            for (idx, (j, l)) in layout.quad_pairs().into_iter().enumerate() {
                assert_abs_diff_eq!(v[idx], -2.0 * s2[(j, l)] / 5.0, epsilon = 1e-12);
            }
            for j in 0..3 {
                assert_abs_diff_eq!(v[layout.linear_index(j)], -p.mean()[j] / 5.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn vt_logistic_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_dataset(5, 2, &mut rng);
        let psi = normal_1d(0.0, 1.0).to_natural();
        assert!(matches!(assemble_vt_logistic(&psi, &data, LogisticMethod::Taylor), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn irls_step_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let v = DVector::from_vec(vec![-2.0, 1.0]);
        let psi0 = normal_1d(0.0, 1.0).to_natural();
        let next = irls_step(&psi0, &v, &m, 1.0).unwrap();
        assert_abs_diff_eq!(next.as_vector()[0], -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(next.as_vector()[1], 1.0, epsilon = 1e-9);
        let fixed = NaturalParam::from_vector(DVector::from_vec(vec![-0.5, 1.0])).unwrap();
        let again = irls_step(&fixed, &v, &m, 0.5).unwrap();
        assert!((again.as_vector() - fixed.as_vector()).abs().max() < 1e-9);
    }

    #[test]
    fn irls_step_singular_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]) * -1.0;
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let psi0 = normal_1d(0.0, 1.0).to_natural();
        assert!(matches!(irls_step(&psi0, &v, &m, 1.0), Err(Error::SolverFailure { .. })));
    }

    #[test]
    fn divergence_closed_forms() {
        let q = normal_1d(0.0, 1.0).to_natural();
        let f = fisher_divergence(&q, &Target1D::Normal { mean: 1.0, sd: 1.0 }, &IntegratorConfig::quadrature(64)).unwrap();
        assert_abs_diff_eq!(f.value, 1.0, epsilon = 1e-10);
        let f = fisher_divergence(&q, &Target1D::Normal { mean: 0.0, sd: 2.0 }, &IntegratorConfig::quadrature(64)).unwrap();
        assert_abs_diff_eq!(f.value, 0.5625, epsilon = 1e-10);
        let f = fisher_divergence(&q, &Target1D::Normal { mean: 0.0, sd: 2.0 }, &IntegratorConfig::exact()).unwrap();
        assert_abs_diff_eq!(f.value, 0.5625, epsilon = 1e-12);
    }

    #[test]
    fn divergence_vanishes_on_own_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_moment(3, &mut rng, 1.0);
        let target = GaussianTarget::new(&p);
        let exact = fisher_divergence(&p.to_natural(), &target, &IntegratorConfig::exact()).unwrap();
        assert!(exact.value.abs() < 1e-12);
        let mc = fisher_divergence(&p.to_natural(), &target, &IntegratorConfig::monte_carlo(5000, 2)).unwrap();
        assert!(mc.value <= 3.0 * mc.std_err + 1e-16);
        let p1 = normal_1d(0.4, 2.0);
        let quad = fisher_divergence(&p1.to_natural(), &GaussianTarget::new(&p1), &IntegratorConfig::quadrature(64)).unwrap();
        assert!(quad.value <= 1e-12);
    }

    #[test]
    fn direct_and_reduced_divergence_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for d in 1..=4 {
            let data = random_dataset(15, d, &mut rng);
            let target = logistic_target(data);
            let psi = random_moment(d, &mut rng, 0.5).to_natural();
            let a = fisher_divergence(&psi, &target, &IntegratorConfig::monte_carlo(4000, 1)).unwrap();
            let b = fisher_divergence_direct(&psi, &target, &IntegratorConfig::monte_carlo(4000, 2)).unwrap();
            let tol = 4.0 * (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
            assert!((a.value - b.value).abs() <= tol, "d={d}");
        }
    }

    #[test]
    fn fit_recovers_gaussian_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in [1, 2, 5] {
            let truth = random_moment(d, &mut rng, 1.0);
            let target = GaussianTarget::new(&truth);
            let init = MomentParam::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap().to_natural();
            let cfg = SolverConfig::exact().with_rho(1.0);
            let report = fit(&target, &init, &cfg).unwrap();
            assert!(report.converged);
            assert!(report.iterations <= 25);
            assert!((report.moment.mean() - truth.mean()).abs().max() < 1e-8);
            assert!((report.moment.cov() - truth.cov()).abs().max() < 1e-8);
        }
    }

    #[test]
    fn fit_is_damping_invariant_on_gaussian_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = random_moment(3, &mut rng, 1.0);
        let target = GaussianTarget::new(&truth);
        let init = MomentParam::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap().to_natural();
        let finals: Vec<MomentParam> = [0.25, 0.5, 1.0]
            .into_iter()
            .map(|rho| {
                let cfg = SolverConfig::exact().with_rho(rho).with_tol(1e-13).with_max_iter(1000);
                fit(&target, &init, &cfg).unwrap().moment
            })
            .collect();
        for f in &finals {
            assert!((f.mean() - truth.mean()).abs().max() < 1e-8);
            assert!((f.cov() - truth.cov()).abs().max() < 1e-8);
        }
    }

    #[test]
    fn fit_from_answer_takes_one_iteration() {
        let target = Target1D::Normal { mean: 1.0, sd: 2.0 };
        let init = normal_1d(1.0, 4.0).to_natural();
        let report = fit(&target, &init, &SolverConfig::quadrature()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        assert_eq!(report.trace.len(), 1);
    }

    #[test]
    fn fit_logistic_converges_and_satisfies_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(200, 5, |_, _| rng.random_range(-2.5..2.5));
        let y = (0..200)
            .map(|i| u8::from(rng.random::<f64>() < crate::targets::logistic(x.row(i).transpose().dot(&theta))))
            .collect();
        let target = logistic_target(Dataset::new(x, y, 5.0).unwrap());
        let init = default_init(&target).unwrap();
        for cfg in [SolverConfig::logistic_taylor(), SolverConfig::logistic_mc(2000, 3)] {
            let report = fit(&target, &init, &cfg).unwrap();
            assert!(report.converged, "{:?}", cfg.assembly);
            assert!(report.iterations <= 500);
            for e in &report.trace {
                assert!(e.delta_inf.is_finite());
                let psi = NaturalParam::from_vector(DVector::from_vec(e.psi.clone())).unwrap();
                assert!(psi.to_moment().is_ok());
            }
            let last = report.trace.last().unwrap();
            assert!(last.delta_inf <= cfg.tol);
            if cfg.assembly == Assembly::LogisticTaylor {
                let r = normal_equations_residual(&report.psi_star, &target, &cfg).unwrap();
                assert!(r <= 10.0 * cfg.tol, "residual {r}");
            }
        }
    }

    #[test]
    fn logistic_assembly_requires_logistic_target() {
        let target = Target1D::StudentT { nu: 3.0 };
        let init = normal_1d(0.0, 1.0).to_natural();
        assert!(matches!(fit(&target, &init, &SolverConfig::logistic_taylor()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().with_rho(0.0).validate(2).is_err());
        assert!(SolverConfig::default().with_rho(1.5).validate(2).is_err());
        assert!(SolverConfig::default().with_tol(0.0).validate(2).is_err());
        assert!(SolverConfig::quadrature().validate(2).is_err());
        assert!(SolverConfig::quadrature().validate(1).is_ok());
    }

    #[test]
    fn normal_mean_examples() {
        let shifted = Target1D::Normal { mean: 3.0, sd: 2.0 };
        let (psi, _) = normal_mean_fit(0.0, 1.0, &shifted, 1e-12, 10_000).unwrap();
        assert!((psi - 3.0).abs() <= 1e-8);
        let std = Target1D::Normal { mean: 0.0, sd: 1.0 };
        assert_eq!(normal_mean_update(0.0, 1.0, &std).unwrap(), 0.0);
        let t4 = Target1D::StudentT { nu: 4.0 };
        assert!(normal_mean_update(0.0, 1.0, &t4).unwrap().abs() <= 1e-15);
        let (psi, _) = normal_mean_fit(1.0, 1.0, &t4, 1e-12, 10_000).unwrap();
        assert!(psi.abs() <= 1e-8);
    }

    #[test]
    fn default_init_examples() {
        let data = Dataset::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.5]), vec![1], 5.0).unwrap();
        let init = default_init(&logistic_target(data)).unwrap().to_moment().unwrap();
        assert_eq!(init.mean().as_slice(), &[0.0, 0.0]);
        assert!((init.cov() - DMatrix::identity(2, 2) * 5.0).abs().max() < 1e-12);

        let t = default_init(&Target1D::StudentT { nu: 4.0 }).unwrap().to_moment().unwrap();
        assert!(t.mean()[0].abs() < 1e-9);

        // independent grid scan
        let target = Target1D::SkewNormal { alpha: 6.0 };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=10_000 {
            let th = -5.0 + k as f64 * 1e-3;
            let v = -0.5 * th * th + crate::targets::normal_cdf(6.0 * th).ln();
            if v > best.0 {
                best = (v, th);
            }
        }
        let s = default_init(&target).unwrap().to_moment().unwrap();
        assert!((s.mean()[0] - best.1).abs() < 1e-12);
        assert!((s.cov()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_expected_fields() {
        let target = Target1D::Normal { mean: 1.0, sd: 2.0 };
        let report = fit(&target, &normal_1d(0.0, 1.0).to_natural(), &SolverConfig::quadrature()).unwrap();
        let json = serde_json::to_value(FitReportRecord::from(&report)).unwrap();
        for key in ["psi_star", "mu", "sigma", "iterations", "converged", "trace", "wall_time_s"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["trace"].as_array().unwrap().len(), report.iterations);
        assert!(json["trace"][0].get("delta_inf").is_some());
        assert!(json["trace"][0].get("objective").is_some());
    }
}
