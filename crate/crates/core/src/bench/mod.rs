//! Experiment harness: simulated logistic-regression data, accuracy metrics
//! against an MCMC reference, credible-region calibration and file output.

pub mod contour;
pub mod coverage;
pub mod fit1d;
pub mod generate;
pub mod run;

pub use coverage::{coverage_curve, coverage_curve_samples, default_grid, error_metrics, error_metrics_against, CoverageCurve};
pub use contour::{contour_grid, ContourGrid, ContourSpec};
pub use fit1d::{fisher_divergence_1d, fisher_fit_1d, fit1d_compare, grid_moments, Fit1dComparison};
pub use generate::{generate_dataset, Covariate, GenConfig};
pub use run::{run_benchmark, run_replicate, BenchReport, BenchSpec, Method, ReplicateArtifacts};
