//! Doubly stochastic variational inference: reparameterized stochastic
//! gradient ascent on the ELBO over a mean and a lower-triangular scale.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::MomentParam;
use crate::targets::{logistic_target, Dataset, TargetModel};

/// Abort once `‖μ‖` exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsviConfig {
    pub n_steps: usize,
    /// Base step; step `t` (1-based) uses `step_size / √t`.
    pub step_size: f64,
    pub seed: u64,
    /// Initial diagonal of the scale factor; the prior's standard deviation
    /// when absent.
    pub init_scale: Option<f64>,
}

impl Default for DsviConfig {
    fn default() -> Self {
        Self { n_steps: 20_000, step_size: 1e-2, seed: 0, init_scale: None }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::targets::logistic(x)
}

/// Fits `N(μ, LLᵀ)` to the logistic-regression posterior with one Monte Carlo
/// draw per step and full-data gradients. The diagonal of `L` is
/// `softplus(γ)`, so it stays positive.
pub fn dsvi_fit(data: &Dataset, cfg: &DsviConfig) -> Result<MomentParam> {
    if cfg.n_steps == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::InvalidConfig("DSVI needs a positive step count and step size".into()));
    }
    let d = data.dim();
    let target = logistic_target(data.clone());
    let init = cfg.init_scale.unwrap_or_else(|| data.tau2().sqrt());
    let mut mu = DVector::<f64>::zeros(d);
    let mut lower = DMatrix::<f64>::zeros(d, d);
    let mut gamma = DVector::from_element(d, softplus_inv(init));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = DVector::<f64>::zeros(d);

    for t in 1..=cfg.n_steps {
        for j in 0..d {
            z[j] = StandardNormal.sample(&mut rng);
            lower[(j, j)] = softplus(gamma[j]);
        }
        let theta = &mu + &lower * &z;
        let g = target.score(&theta);
        let step = cfg.step_size / (t as f64).sqrt();

        mu.axpy(step, &g, 1.0);
        for i in 0..d {
            for j in 0..i {
                lower[(i, j)] += step * g[i] * z[j];
            }
            // entropy contributes log L_ii
            let dl = g[i] * z[i] + 1.0 / lower[(i, i)];
            gamma[i] += step * dl * sigmoid(gamma[i]);
        }

        let norm = mu.norm();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::SolverFailure {
                iteration: t,
                reason: format!("DSVI diverged: |mu| = {norm:e}, step size {step:e}"),
            });
        }
    }
    for j in 0..d {
        lower[(j, j)] = softplus(gamma[j]);
    }
    let sigma = &lower * lower.transpose();
    MomentParam::new(mu, sigma)
}
