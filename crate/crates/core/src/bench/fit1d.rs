//! One-dimensional KL-vs-Fisher comparison with density grids for plotting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::kl1d::nelder_mead;
use crate::baselines::kl_fit_1d;
use crate::error::{Error, Result};
use crate::integrate::gh_expectation;
use crate::irls::{default_init, fit, SolverConfig};
use crate::targets::Target1D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit1dRow {
    pub method: String,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub theta: f64,
    pub target: f64,
    pub kl: f64,
    pub fisher: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit1dComparison {
    pub target: Target1D,
    pub kl: Fit1dRow,
    pub fisher: Fit1dRow,
    /// The damped-IRLS fixed point, which the direct fit starts from.
    pub irls: Fit1dRow,
    pub fisher_iterations: usize,
    pub grid: Vec<DensityRow>,
}

const GRID_LO: f64 = -10.0;
const GRID_HI: f64 = 10.0;
const GRID_POINTS: usize = 2001;

fn normal_pdf(t: f64, mu: f64, sigma: f64) -> f64 {
    let z = (t - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Target density normalized by the trapezoid rule on `lo..=hi`.
pub fn normalized_density(target: &Target1D, lo: f64, hi: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    target.validate()?;
    if points < 2 || !(hi > lo) {
        return Err(Error::InvalidConfig("density grid needs hi > lo and at least two points".into()));
    }
    let h = (hi - lo) / (points - 1) as f64;
    let logs: Vec<(f64, f64)> = (0..points)
        .map(|k| {
            let t = lo + k as f64 * h;
            (t, target.log_unnorm_1d(t))
        })
        .collect();
    let peak = logs.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<(f64, f64)> = logs.iter().map(|&(t, l)| (t, (l - peak).exp())).collect();
    let mass = h * (raw.iter().map(|r| r.1).sum::<f64>() - 0.5 * (raw[0].1 + raw[points - 1].1));
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::NonFinite { context: "target normalizing constant".into() });
    }
    Ok(raw.into_iter().map(|(t, p)| (t, p / mass)).collect())
}

/// Mean and variance of the target computed on a grid.
pub fn grid_moments(target: &Target1D, lo: f64, hi: f64, points: usize) -> Result<(f64, f64)> {
    let dens = normalized_density(target, lo, hi, points)?;
    let h = (hi - lo) / (points - 1) as f64;
    let trap = |f: &dyn Fn(f64, f64) -> f64| {
        let s: f64 = dens.iter().map(|&(t, p)| f(t, p)).sum();
        h * (s - 0.5 * (f(dens[0].0, dens[0].1) + f(dens[points - 1].0, dens[points - 1].1)))
    };
    let mean = trap(&|t, p| t * p);
    let var = trap(&|t, p| (t - mean) * (t - mean) * p);
    Ok((mean, var))
}

const FISHER_NODES: usize = 128;

/// `E_q[(∂log q − ∂log π)²]` for `q = N(μ, σ²)`, by Gauss–Hermite quadrature.
pub fn fisher_divergence_1d(mu: f64, sigma: f64, target: &Target1D) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma = {sigma} must be positive")));
    }
    let prec = 1.0 / (sigma * sigma);
    gh_expectation(
        |t| {
            let r = -(t - mu) * prec - target.score_1d(t);
            r * r
        },
        mu,
        sigma * sigma,
        FISHER_NODES,
    )
}

/// Local minimization of [`fisher_divergence_1d`] over `(μ, log σ)` by
/// Nelder–Mead from `start = (μ₀, σ₀)`.
///
/// The IRLS fixed point solves `E_q[∇s (∇log q − ∇log π)] = 0` with the
/// weighting density frozen; by Stein's identity those equations coincide
/// with the stationarity conditions of `KL(q‖π)`. Differentiating through
/// the weighting density gives the divergence minimizer computed here. The
/// search is local on purpose: for heavy-tailed targets such as the Cauchy,
/// `F → 0` as `σ → ∞`, and the meaningful fit is the interior minimum.
pub fn fisher_fit_1d(target: &Target1D, start: (f64, f64)) -> Result<(f64, f64)> {
    target.validate()?;
    if !(start.1 > 0.0 && start.0.is_finite()) {
        return Err(Error::InvalidConfig(format!("start ({}, {}) needs finite mean and positive sigma", start.0, start.1)));
    }
    let objective = |p: [f64; 2]| fisher_divergence_1d(p[0], p[1].exp(), target).unwrap_or(f64::INFINITY);
    let [mu, ls] = nelder_mead(objective, [start.0, start.1.ln()], [0.05, 0.05], 1e-11, 10_000);
    if !(mu.is_finite() && ls.is_finite()) {
        return Err(Error::NonFinite { context: "Fisher divergence minimization".into() });
    }
    Ok((mu, ls.exp()))
}

/// Runs the KL and the quadrature-backed Fisher fit and evaluates all three
/// densities on a common grid.
pub fn fit1d_compare(target: &Target1D) -> Result<Fit1dComparison> {
    target.validate()?;
    let (kl_mu, kl_sigma) = kl_fit_1d(target)?;
    let init = default_init(target)?;
    let cfg = SolverConfig::quadrature().with_tol(1e-10).with_max_iter(2000);
    let report = fit(target, &init, &cfg)?;
    let irls = (report.moment.mean()[0], report.moment.cov()[(0, 0)].sqrt());
    let (f_mu, f_sigma) = fisher_fit_1d(target, irls)?;
    let grid = normalized_density(target, GRID_LO, GRID_HI, GRID_POINTS)?
        .into_iter()
        .map(|(theta, p)| DensityRow {
            theta,
            target: p,
            kl: normal_pdf(theta, kl_mu, kl_sigma),
            fisher: normal_pdf(theta, f_mu, f_sigma),
        })
        .collect();
    Ok(Fit1dComparison {
        target: *target,
        kl: Fit1dRow { method: "kl".into(), mu: kl_mu, sigma: kl_sigma },
        fisher: Fit1dRow { method: "fisher".into(), mu: f_mu, sigma: f_sigma },
        irls: Fit1dRow { method: "irls_fixed_point".into(), mu: irls.0, sigma: irls.1 },
        fisher_iterations: report.iterations,
        grid,
    })
}

impl Fit1dComparison {
    /// `method,mu,sigma`.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("method,mu,sigma\n");
        for r in [&self.kl, &self.fisher, &self.irls] {
            let _ = writeln!(out, "{},{:?},{:?}", r.method, r.mu, r.sigma);
        }
        out
    }

    /// `theta,target,kl,fisher`.
    pub fn density_csv(&self) -> String {
        let mut out = String::from("theta,target,kl,fisher\n");
        for r in &self.grid {
            let _ = writeln!(out, "{:?},{:?},{:?},{:?}", r.theta, r.target, r.kl, r.fisher);
        }
        out
    }
}
