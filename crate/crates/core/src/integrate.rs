//! Expectations under a Gaussian: Gauss–Hermite quadrature in one dimension,
//! seeded Monte Carlo in any dimension, and a second-order Taylor rule for the
//! logistic integrands that appear in the logistic-regression system.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{standard_normals, transform_normals, MomentParam, NaturalParam};
use crate::linalg::pairwise_sum;
use crate::targets::{logistic, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorMethod {
    /// Gauss–Hermite; one-dimensional families only.
    Quadrature,
    MonteCarlo,
    /// Second-order Taylor expansion of the logistic integrands.
    Taylor,
    /// Closed-form Gaussian moments; requires a target with affine score.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    pub n_nodes: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { method: IntegratorMethod::MonteCarlo, n_nodes: 64, n_samples: 2000, seed: 0 }
    }
}

impl IntegratorConfig {
    pub fn quadrature(n_nodes: usize) -> Self {
        Self { method: IntegratorMethod::Quadrature, n_nodes, ..Self::default() }
    }

    pub fn monte_carlo(n_samples: usize, seed: u64) -> Self {
        Self { method: IntegratorMethod::MonteCarlo, n_samples, seed, ..Self::default() }
    }

    pub fn taylor() -> Self {
        Self { method: IntegratorMethod::Taylor, ..Self::default() }
    }

    pub fn exact() -> Self {
        Self { method: IntegratorMethod::Exact, ..Self::default() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::InvalidConfig(format!("n_nodes = {} must be at least 2", self.n_nodes)));
        }
        if self.n_samples < 100 {
            return Err(Error::InvalidConfig(format!("n_samples = {} must be at least 100", self.n_samples)));
        }
        if self.method == IntegratorMethod::Quadrature && d != 1 {
            return Err(Error::InvalidConfig(format!("quadrature is only available for d = 1, got d = {d}")));
        }
        Ok(())
    }
}

/// Gauss–Hermite rule for the weight `exp(−t²)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch on the Jacobi matrix, then a Newton polish of each node
    /// against the three-term recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        for pair in pairs.iter_mut() {
            let mut t = pair.0;
            for _ in 0..10 {
                let (p, dp) = hermite_orthonormal(n, t);
                let step = p / dp;
                t -= step;
                if step.abs() <= 1e-16 * t.abs().max(1.0) {
                    break;
                }
            }
            let (_, dp) = hermite_orthonormal(n, t);
            *pair = (t, 2.0 / (dp * dp));
        }
        // enforce the rule's symmetry exactly
        for k in 0..n / 2 {
            let (a, b) = (pairs[k], pairs[n - 1 - k]);
            let t = 0.5 * (b.0 - a.0);
            let w = 0.5 * (a.1 + b.1);
            pairs[k] = (-t, w);
            pairs[n - 1 - k] = (t, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
    }

    /// Cached rule for `n` nodes.
    pub fn cached(n: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard.entry(n).or_insert_with(|| Arc::new(GaussHermite::new(n))).clone()
    }

    /// Nodes and probability weights for `N(μ, σ²)`.
    pub fn normal_nodes(&self, mu: f64, sigma2: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let scale = (2.0 * sigma2).sqrt();
        let norm = std::f64::consts::PI.sqrt().recip();
        self.nodes.iter().zip(&self.weights).map(move |(&t, &w)| (mu + scale * t, w * norm))
    }
}

// Orthonormal Hermite polynomial p_n(t) and its derivative.
fn hermite_orthonormal(n: usize, t: f64) -> (f64, f64) {
    let mut p_prev = 0.0;
    let mut p = std::f64::consts::PI.powf(-0.25);
    for j in 1..=n {
        let jf = j as f64;
        let next = t * (2.0 / jf).sqrt() * p - ((jf - 1.0) / jf).sqrt() * p_prev;
        p_prev = p;
        p = next;
    }
    (p, (2.0 * n as f64).sqrt() * p_prev)
}

/// `E f(θ)` for `θ ~ N(μ, σ²)` by Gauss–Hermite quadrature.
pub fn gh_expectation<F: Fn(f64) -> f64>(f: F, mu: f64, sigma2: f64, n_nodes: usize) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("variance {sigma2} must be positive")));
    }
    let rule = GaussHermite::cached(n_nodes);
    let nodes: Vec<(f64, f64)> = rule.normal_nodes(mu, sigma2).collect();
    let mut values = Vec::with_capacity(n_nodes);
    for &(x, w) in &nodes {
        let fx = f(x);
        if !fx.is_finite() {
            return Err(Error::NonFinite { context: format!("integrand at quadrature node {x}") });
        }
        values.push(w * fx);
    }
    Ok(pairwise_sum(&mirrored_pairs(&values)))
}

// Adds the terms of mirror-image nodes first, so odd integrands about the
// mean cancel exactly.
fn mirrored_pairs(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out: Vec<f64> = (0..n / 2).map(|k| values[k] + values[n - 1 - k]).collect();
    if n % 2 == 1 {
        out.push(values[n / 2]);
    }
    out
}

/// Vector-valued version of [`gh_expectation`].
pub fn gh_expectation_vec<F: Fn(f64) -> DVector<f64>>(f: F, mu: f64, sigma2: f64, n_nodes: usize) -> Result<DVector<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("variance {sigma2} must be positive")));
    }
    let rule = GaussHermite::cached(n_nodes);
    let mut values = Vec::with_capacity(n_nodes);
    for (x, w) in rule.normal_nodes(mu, sigma2) {
        let fx = f(x);
        if fx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("integrand at quadrature node {x}") });
        }
        values.push(fx * w);
    }
    let k = values[0].len();
    let mut column = vec![0.0; n_nodes];
    Ok(DVector::from_fn(k, |c, _| {
        for (slot, v) in column.iter_mut().zip(&values) {
            *slot = v[c];
        }
        pairwise_sum(&mirrored_pairs(&column))
    }))
}

/// A Monte Carlo mean with per-component standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: DVector<f64>,
    pub std_err: DVector<f64>,
    pub n: usize,
}

/// Sample mean of `f` over the rows of `draws`. Evaluation runs in parallel;
/// the reduction is a fixed-order pairwise sum, so results do not depend on
/// the thread count.
pub fn mc_over_draws<F>(f: F, draws: &DMatrix<f64>) -> Result<McEstimate>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let n = draws.nrows();
    if n < 2 {
        return Err(Error::InvalidConfig("need at least two draws".into()));
    }
    let values: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| f(&draws.row(i).transpose()))
        .collect();
    if let Some(bad) = values.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { context: format!("integrand at draw {bad}") });
    }
    let k = values[0].len();
    let mut mean = DVector::zeros(k);
    let mut std_err = DVector::zeros(k);
    let mut column = vec![0.0; n];
    for c in 0..k {
        for (slot, v) in column.iter_mut().zip(&values) {
            *slot = v[c];
        }
        let m = pairwise_sum(&column) / n as f64;
        for slot in column.iter_mut() {
            *slot = (*slot - m).powi(2);
        }
        let var = pairwise_sum(&column) / (n as f64 - 1.0);
        mean[c] = m;
        std_err[c] = (var / n as f64).sqrt();
    }
    Ok(McEstimate { mean, std_err, n })
}

/// Monte Carlo estimate of `E f(θ)` for `θ ~ q_ψ`, using `cfg.n_samples`
/// draws generated from `cfg.seed`.
pub fn mc_expectation<F>(f: F, psi: &NaturalParam, cfg: &IntegratorConfig) -> Result<McEstimate>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let p = psi.to_moment()?;
    let z = standard_normals(cfg.seed, cfg.n_samples, p.dim());
    mc_over_draws(f, &transform_normals(&z, &p))
}

/// `f_ij(θ) = θ_j / (1 + exp(x_iᵀθ))`.
pub fn fij(x: &DVector<f64>, j: usize, theta: &DVector<f64>) -> f64 {
    theta[j] * logistic(-x.dot(theta))
}

pub fn fij_gradient(x: &DVector<f64>, j: usize, theta: &DVector<f64>) -> DVector<f64> {
    let s = logistic(-x.dot(theta));
    let mut g = x * (-theta[j] * s * (1.0 - s));
    g[j] += s;
    g
}

/// Closed-form Hessian of `f_ij`:
/// `e_j ∇sᵀ + ∇s e_jᵀ + θ_j s(1−s)(1−2s) x xᵀ` with `∇s = −s(1−s) x`.
pub fn fij_hessian(x: &DVector<f64>, j: usize, theta: &DVector<f64>) -> DMatrix<f64> {
    let s = logistic(-x.dot(theta));
    let w = s * (1.0 - s);
    let mut h = x * x.transpose() * (theta[j] * w * (1.0 - 2.0 * s));
    for r in 0..x.len() {
        h[(r, j)] -= w * x[r];
        h[(j, r)] -= w * x[r];
    }
    h
}

/// Taylor approximation of `E f_ij(θ)` under `N(μ, Σ)`:
/// `f_ij(μ) + tr{H_ij(μ) Σ} / 2`.
pub fn taylor_expectation_fij(i: usize, j: usize, p: &MomentParam, data: &Dataset) -> f64 {
    let x = data.x().row(i).transpose();
    let sx = p.cov() * &x;
    let terms = TaylorTerms::new(&x, &sx, p.mean());
    terms.fij(j, p.mean(), &sx)
}

/// Taylor approximation of `E 1/(1 + exp(x_iᵀθ))` under `N(μ, Σ)`.
pub fn taylor_expectation_sigmoid(i: usize, p: &MomentParam, data: &Dataset) -> f64 {
    let x = data.x().row(i).transpose();
    let sx = p.cov() * &x;
    TaylorTerms::new(&x, &sx, p.mean()).sigmoid()
}

/// Per-observation quantities shared by all Taylor expectations for one row.
pub(crate) struct TaylorTerms {
    s: f64,
    w: f64,
    curv: f64,
    quad: f64,
}

impl TaylorTerms {
    /// `sx` must be `Σ x`.
    pub(crate) fn new(x: &DVector<f64>, sx: &DVector<f64>, mu: &DVector<f64>) -> Self {
        let s = logistic(-x.dot(mu));
        let w = s * (1.0 - s);
        Self { s, w, curv: w * (1.0 - 2.0 * s), quad: x.dot(sx) }
    }

    pub(crate) fn sigmoid(&self) -> f64 {
        self.s + 0.5 * self.curv * self.quad
    }

    pub(crate) fn fij(&self, j: usize, mu: &DVector<f64>, sx: &DVector<f64>) -> f64 {
        mu[j] * self.s + 0.5 * (-2.0 * self.w * sx[j] + mu[j] * self.curv * self.quad)
    }
}
