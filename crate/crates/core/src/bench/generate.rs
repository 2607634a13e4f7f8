use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{logistic, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Isotropic,
    /// Stationary AR(1) across the coordinates of each covariate vector.
    Ar1,
}

impl std::str::FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" | "iso" => Ok(Covariate::Isotropic),
            "ar1" => Ok(Covariate::Ar1),
            other => Err(Error::InvalidConfig(format!("unknown covariate model {other:?}"))),
        }
    }
}

impl std::fmt::Display for Covariate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Covariate::Isotropic => "isotropic",
            Covariate::Ar1 => "ar1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub d: usize,
    pub covariate: Covariate,
    pub covariate_variance: f64,
    pub ar_rho: f64,
    pub theta_variance: f64,
    pub tau2: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 200,
            d: 5,
            covariate: Covariate::Isotropic,
            covariate_variance: 3.0,
            ar_rho: 0.8,
            theta_variance: 1.0,
            tau2: 5.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("n and d must be positive".into()));
        }
        if !(self.covariate_variance > 0.0 && self.theta_variance > 0.0 && self.tau2 > 0.0) {
            return Err(Error::InvalidConfig("variances must be positive".into()));
        }
        if !(self.ar_rho > -1.0 && self.ar_rho < 1.0) {
            return Err(Error::InvalidConfig(format!("ar_rho = {} must lie in (-1, 1)", self.ar_rho)));
        }
        Ok(())
    }
}

/// Draws `θ* ~ N(0, θ_var I)`, covariate rows, then `y_i ~ Bernoulli(logistic(x_iᵀθ*))`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, DVector<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta_sd = cfg.theta_variance.sqrt();
    let theta = DVector::from_fn(cfg.d, |_, _| theta_sd * rng.sample::<f64, _>(StandardNormal));

    let x_sd = cfg.covariate_variance.sqrt();
    let innovation_sd = (1.0 - cfg.ar_rho * cfg.ar_rho).sqrt();
    let mut x = DMatrix::zeros(cfg.n, cfg.d);
    for i in 0..cfg.n {
        let mut prev = 0.0;
        for j in 0..cfg.d {
            let e: f64 = rng.sample(StandardNormal);
            let unit = match cfg.covariate {
                Covariate::Isotropic => e,
                Covariate::Ar1 if j == 0 => e,
                Covariate::Ar1 => cfg.ar_rho * prev + innovation_sd * e,
            };
            prev = unit;
            x[(i, j)] = x_sd * unit;
        }
    }
    let y = (0..cfg.n)
        .map(|i| {
            let p = logistic(x.row(i).transpose().dot(&theta));
            u8::from(rng.random::<f64>() < p)
        })
        .collect();
    Ok((Dataset::new(x, y, cfg.tau2)?, theta))
}
