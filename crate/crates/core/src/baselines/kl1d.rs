//! One-dimensional normal fits by reverse Kullback–Leibler minimization.

use crate::error::{Error, Result};
use crate::integrate::gh_expectation;
use crate::targets::Target1D;

const KL_NODES: usize = 128;
const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

/// `E_q[log q − log π̃]` for `q = N(μ, σ²)`. The target's normalizing constant
/// is unknown, so only differences between `(μ, σ)` pairs are meaningful.
pub fn kl_divergence_1d(mu: f64, sigma: f64, target: &Target1D) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma = {sigma} must be positive")));
    }
    let neg_entropy = -0.5 * (LN_2PI_E + 2.0 * sigma.ln());
    let cross = gh_expectation(|t| target.log_unnorm_1d(t), mu, sigma * sigma, KL_NODES)?;
    Ok(neg_entropy - cross)
}

/// Coarse grid over `μ ∈ [−10, 10]` and log-spaced `σ ∈ [0.05, 10]`, then
/// Nelder–Mead on `(μ, log σ)`.
pub fn kl_fit_1d(target: &Target1D) -> Result<(f64, f64)> {
    target.validate()?;
    const GRID: usize = 200;
    let (sig_lo, sig_hi) = (0.05f64.ln(), 10f64.ln());
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..GRID {
        let mu = -10.0 + 20.0 * a as f64 / (GRID - 1) as f64;
        for b in 0..GRID {
            let ls = sig_lo + (sig_hi - sig_lo) * b as f64 / (GRID - 1) as f64;
            let v = kl_divergence_1d(mu, ls.exp(), target)?;
            if v < best.0 {
                best = (v, mu, ls);
            }
        }
    }
    let objective = |p: [f64; 2]| kl_divergence_1d(p[0], p[1].exp(), target).unwrap_or(f64::INFINITY);
    let [mu, ls] = nelder_mead(objective, [best.1, best.2], [0.1, 0.05], 1e-11, 10_000);
    Ok((mu, ls.exp()))
}

/// Minimal two-parameter Nelder–Mead with standard coefficients.
pub(crate) fn nelder_mead<F: Fn([f64; 2]) -> f64>(f: F, start: [f64; 2], step: [f64; 2], xtol: f64, max_iter: usize) -> [f64; 2] {
    let mut simplex = [start, [start[0] + step[0], start[1]], [start[0], start[1] + step[1]]];
    let mut values = simplex.map(&f);
    for _ in 0..max_iter {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);

        let size = (1..3)
            .map(|k| (simplex[k][0] - simplex[0][0]).abs().max((simplex[k][1] - simplex[0][1]).abs()))
            .fold(0.0, f64::max);
        if size <= xtol {
            break;
        }

        let centroid = [(simplex[0][0] + simplex[1][0]) / 2.0, (simplex[0][1] + simplex[1][1]) / 2.0];
        let along = |t: f64| [centroid[0] + t * (simplex[2][0] - centroid[0]), centroid[1] + t * (simplex[2][1] - centroid[1])];

        let reflected = along(-1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let (contracted, fc) = if fr < values[2] {
                let c = along(-0.5);
                (c, f(c))
            } else {
                let c = along(0.5);
                (c, f(c))
            };
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for k in 1..3 {
                    simplex[k] = [
                        simplex[0][0] + 0.5 * (simplex[k][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[k][1] - simplex[0][1]),
                    ];
                    values[k] = f(simplex[k]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    simplex[best]
}
