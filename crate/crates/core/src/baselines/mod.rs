//! Reference and competing methods.

pub mod dsvi;
pub mod jj;
pub mod kl1d;
pub mod mcmc;

pub use dsvi::{dsvi_fit, DsviConfig};
pub use jj::{jj_fit, jj_lambda, JjFit};
pub use kl1d::{kl_divergence_1d, kl_fit_1d};
pub use mcmc::{metropolis_hastings, read_samples_csv, sample_moments, write_samples_csv, McmcConfig, McmcResult, McmcSummary, ProposalScale};
