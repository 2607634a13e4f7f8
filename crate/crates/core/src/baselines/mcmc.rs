//! Random-walk Metropolis–Hastings.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::TargetModel;

/// Acceptance rate the adaptive scale aims for during burn-in.
pub const TARGET_ACCEPTANCE: f64 = 0.234;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalScale {
    Fixed(f64),
    /// Robbins–Monro adaptation of the log scale during burn-in, frozen after.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub proposal_scale: ProposalScale,
    pub seed: u64,
    /// Starting point; the origin when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { n_iter: 100_000, burn_in: 20_000, proposal_scale: ProposalScale::Auto, seed: 0, init: None }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::InvalidConfig(format!("burn_in {} must be below n_iter {}", self.burn_in, self.n_iter)));
        }
        if self.n_iter - self.burn_in < 2 {
            return Err(Error::InvalidConfig("need at least two retained draws".into()));
        }
        if let ProposalScale::Fixed(s) = self.proposal_scale {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!("proposal scale {s} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcResult {
    /// Retained draws, one per row.
    pub samples: DMatrix<f64>,
    /// Acceptance rate over the retained iterations.
    pub acceptance_rate: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Proposal scale used after burn-in.
    pub proposal_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSummary {
    pub n_samples: usize,
    pub acceptance_rate: f64,
    pub proposal_scale: f64,
    pub mean: Vec<f64>,
    /// Row-major.
    pub cov: Vec<f64>,
}

impl McmcResult {
    pub fn from_samples(samples: DMatrix<f64>, acceptance_rate: f64, proposal_scale: f64) -> Self {
        let (mean, cov) = sample_moments(&samples);
        Self { samples, acceptance_rate, mean, cov, proposal_scale }
    }

    pub fn summary(&self) -> McmcSummary {
        let d = self.mean.len();
        McmcSummary {
            n_samples: self.samples.nrows(),
            acceptance_rate: self.acceptance_rate,
            proposal_scale: self.proposal_scale,
            mean: self.mean.iter().copied().collect(),
            cov: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| self.cov[(i, j)]).collect(),
        }
    }

    /// One draw per row under a `theta1,...,thetad` header.
    pub fn write_samples_csv<W: Write>(&self, w: W) -> Result<()> {
        write_samples_csv(&self.samples, w)
    }
}

pub fn write_samples_csv<W: Write>(samples: &DMatrix<f64>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record((1..=samples.ncols()).map(|j| format!("theta{j}")))?;
    for row in samples.row_iter() {
        wtr.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: std::io::Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::InvalidData(format!("sample row {} has {} fields, expected {d}", n + 1, rec.len())));
        }
        for field in rec.iter() {
            values.push(field.trim().parse::<f64>().map_err(|e| Error::InvalidData(format!("sample row {}: {e}", n + 1)))?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidData("no samples".into()));
    }
    Ok(DMatrix::from_row_slice(n, d, &values))
}

/// Sample mean and unbiased sample covariance of the rows.
pub fn sample_moments(samples: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.nrows();
    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    crate::linalg::symmetrize(&mut cov);
    (mean, cov)
}

/// Accept/reject in log space. Uphill moves (`log_ratio ≥ 0`) are always
/// accepted without consuming the uniform.
pub fn accept(log_ratio: f64, uniform: impl FnOnce() -> f64) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    uniform().ln() < log_ratio
}

pub fn metropolis_hastings(target: &dyn TargetModel, cfg: &McmcConfig) -> Result<McmcResult> {
    cfg.validate()?;
    let d = target.dim();
    let mut theta = match &cfg.init {
        Some(v) if v.len() != d => return Err(Error::DimensionMismatch { expected: d, found: v.len() }),
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(d),
    };
    let mut logp = target.log_unnorm(&theta);
    if !logp.is_finite() {
        return Err(Error::NonFinite { context: "target log density at the chain's starting point".into() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adaptive = matches!(cfg.proposal_scale, ProposalScale::Auto);
    let mut log_scale = match cfg.proposal_scale {
        ProposalScale::Fixed(s) => s.ln(),
        ProposalScale::Auto => (2.38 / (d as f64).sqrt()).ln() - 2.0,
    };

    let kept = cfg.n_iter - cfg.burn_in;
    let mut samples = DMatrix::zeros(kept, d);
    let mut accepted = 0usize;
    let mut proposal = DVector::zeros(d);

    for it in 0..cfg.n_iter {
        let scale = log_scale.exp();
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            proposal[j] = theta[j] + scale * eps;
        }
        let logp_new = target.log_unnorm(&proposal);
        let log_ratio = if logp_new.is_finite() { logp_new - logp } else { f64::NEG_INFINITY };
        let ok = accept(log_ratio, || rng.random::<f64>());
        if ok {
            theta.copy_from(&proposal);
            logp = logp_new;
        }
        if it < cfg.burn_in {
            if adaptive {
                let alpha = log_ratio.min(0.0).exp();
                let gain = 1.0 / ((it + 1) as f64).powf(0.6);
                log_scale += gain * (alpha - TARGET_ACCEPTANCE);
            }
        } else {
            if ok {
                accepted += 1;
            }
            samples.row_mut(it - cfg.burn_in).copy_from(&theta.transpose());
        }
    }

    Ok(McmcResult::from_samples(samples, accepted as f64 / kept as f64, log_scale.exp()))
}
