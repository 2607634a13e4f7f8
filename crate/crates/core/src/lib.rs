//! Gaussian variational approximation by Fisher-divergence minimization.
//!
//! The approximating family is the full-covariance Gaussian in natural
//! parameters ([`expfam`]). [`irls::fit`] minimizes the Fisher divergence to a
//! [`targets::TargetModel`] by damped iteratively re-weighted least squares,
//! with expectations from [`integrate`]. [`baselines`] and [`bench`] hold the
//! comparison methods and the experiment harness.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod expfam;
pub mod integrate;
pub mod irls;
pub mod linalg;
pub mod targets;

pub use error::{Error, Result};
pub use expfam::{MomentParam, NaturalParam};
pub use irls::{fit, FitReport, SolverConfig};
pub use targets::{Dataset, TargetModel};
