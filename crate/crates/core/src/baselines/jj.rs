//! Jaakkola–Jordan variational bound for Bayesian logistic regression.
//!
//! Each likelihood term is bounded below by a Gaussian-shaped function of
//! `x_iᵀθ` with a variational parameter `ξ_i`, which makes the bound
//! conjugate to the Gaussian prior. Sweeps alternate a Gaussian update with
//! `ξ_i² = x_iᵀ(Σ + μμᵀ)x_i`.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::expfam::MomentParam;
use crate::linalg::{cholesky_inverse, cholesky_lower};
use crate::targets::Dataset;

pub const MAX_SWEEPS: usize = 1000;
pub const XI_TOL: f64 = 1e-8;

/// `λ(ξ) = tanh(ξ/2) / (4ξ)`, with the limit `1/8` at zero.
pub fn jj_lambda(xi: f64) -> f64 {
    let xi = xi.abs();
    if xi < 1e-6 {
        return 0.125 - xi * xi / 96.0;
    }
    (0.5 * xi).tanh() / (4.0 * xi)
}

#[derive(Debug, Clone)]
pub struct JjFit {
    pub moment: MomentParam,
    pub sweeps: usize,
    pub converged: bool,
    /// Final precision matrix `τ⁻²I + 2 Σ_i λ(ξ_i) x_i x_iᵀ`.
    pub precision: DMatrix<f64>,
}

pub fn jj_fit(data: &Dataset) -> Result<JjFit> {
    let (n, d) = (data.n(), data.dim());
    let x = data.x();
    let prior_prec = 1.0 / data.tau2();
    let centered_y = data.y().map(|y| y - 0.5);
    let b = x.tr_mul(&centered_y);

    // start from the prior's second moments
    let mut xi = DVector::from_fn(n, |i, _| (data.tau2() * x.row(i).norm_squared()).sqrt());
    let mut sweeps = 0;
    let mut converged = false;
    let (mut sigma, mut mu, mut precision);
    loop {
        precision = DMatrix::identity(d, d) * prior_prec;
        for i in 0..n {
            let xi_row = x.row(i);
            let w = 2.0 * jj_lambda(xi[i]);
            precision += xi_row.transpose() * xi_row * w;
        }
        let l = cholesky_lower(&precision)?;
        sigma = cholesky_inverse(&l);
        mu = &sigma * &b;
        sweeps += 1;

        let second = &sigma + &mu * mu.transpose();
        let mut max_change: f64 = 0.0;
        for i in 0..n {
            let xr = x.row(i).transpose();
            let new = xr.dot(&(&second * &xr)).max(0.0).sqrt();
            max_change = max_change.max((new - xi[i]).abs());
            xi[i] = new;
        }
        if max_change <= XI_TOL {
            converged = true;
            break;
        }
        if sweeps >= MAX_SWEEPS {
            break;
        }
    }
    Ok(JjFit { moment: MomentParam::new(mu, sigma)?, sweeps, converged, precision })
}
