use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::baselines::McmcResult;
use crate::error::{Error, Result};
use crate::expfam::MomentParam;
use crate::linalg::{cholesky_inverse, symmetrize};

/// `‖μ̂ − μ_MCMC‖₂` and `‖Σ̂ − Σ_MCMC‖_F`.
pub fn error_metrics(fit: &MomentParam, reference: &McmcResult) -> Result<(f64, f64)> {
    error_metrics_against(fit, &reference.mean, &reference.cov)
}

/// [`error_metrics`] against explicit reference moments.
pub fn error_metrics_against(fit: &MomentParam, ref_mean: &nalgebra::DVector<f64>, ref_cov: &DMatrix<f64>) -> Result<(f64, f64)> {
    if fit.dim() != ref_mean.len() || ref_cov.nrows() != fit.dim() {
        return Err(Error::DimensionMismatch { expected: fit.dim(), found: ref_mean.len() });
    }
    Ok(((fit.mean() - ref_mean).norm(), (fit.cov() - ref_cov).norm()))
}

/// Probability mass, under a reference sample, of the Gaussian credible
/// ellipsoids `R_c` of a fit, for each level `c` in `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub grid: Vec<f64>,
    pub prob: Vec<f64>,
    pub mean_abs_dev: f64,
}

/// `c = 0.01, 0.02, …, 0.99`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// Coverage of a fit's credible ellipsoids under the MCMC reference draws.
pub fn coverage_curve(fit: &MomentParam, reference: &McmcResult, grid: &[f64]) -> Result<CoverageCurve> {
    coverage_curve_samples(fit, &reference.samples, grid)
}

/// `R_c = {θ : (θ−μ̂)ᵀΣ̂⁻¹(θ−μ̂) ≤ χ²_d(c)}`; `Π(R_c)` is the fraction of
/// reference samples (rows of `samples`) inside.
pub fn coverage_curve_samples(fit: &MomentParam, samples: &DMatrix<f64>, grid: &[f64]) -> Result<CoverageCurve> {
    let d = fit.dim();
    if samples.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: samples.ncols() });
    }
    if samples.nrows() == 0 {
        return Err(Error::InvalidData("no reference samples".into()));
    }
    if let Some(c) = grid.iter().find(|&&c| !(c > 0.0 && c < 1.0)) {
        return Err(Error::InvalidConfig(format!("credible level {c} must lie in (0, 1)")));
    }
    let mut precision = cholesky_inverse(&crate::linalg::cholesky_lower(fit.cov())?);
    symmetrize(&mut precision);
    let mut dist: Vec<f64> = samples
        .row_iter()
        .map(|row| {
            let r = row.transpose() - fit.mean();
            r.dot(&(&precision * &r))
        })
        .collect();
    dist.sort_by(f64::total_cmp);

    let chi = ChiSquared::new(d as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = dist.len() as f64;
    let prob: Vec<f64> = grid
        .iter()
        .map(|&c| {
            let q = chi.inverse_cdf(c);
            dist.partition_point(|&v| v <= q) as f64 / n
        })
        .collect();
    let mean_abs_dev = prob.iter().zip(grid).map(|(p, c)| (p - c).abs()).sum::<f64>() / grid.len() as f64;
    Ok(CoverageCurve { grid: grid.to_vec(), prob, mean_abs_dev })
}
