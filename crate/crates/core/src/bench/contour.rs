//! Pairwise density grids: Gaussian marginals of fitted approximations next
//! to a kernel density estimate of the reference draws.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::MomentParam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    /// Zero-based coordinate pair.
    pub pair: (usize, usize),
    pub points: usize,
    /// Half-width of the grid in reference standard deviations.
    pub half_width: f64,
    /// The KDE uses at most this many evenly strided draws.
    pub max_kde_samples: usize,
}

impl ContourSpec {
    pub fn new(i: usize, j: usize) -> Self {
        Self { pair: (i, j), points: 60, half_width: 4.0, max_kde_samples: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourGrid {
    pub pair: (usize, usize),
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Column names after the two coordinates; `kde` first.
    pub names: Vec<String>,
    /// `values[k][a * ys.len() + b]` is surface `k` at `(xs[a], ys[b])`.
    pub values: Vec<Vec<f64>>,
}

struct Gauss2 {
    mean: Vector2<f64>,
    inv: Matrix2<f64>,
    norm: f64,
}

impl Gauss2 {
    fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let det = cov.determinant();
        let inv = cov.try_inverse().filter(|_| det > 0.0).ok_or(Error::NotPositiveDefinite { minor: 2 })?;
        Ok(Self { mean, inv, norm: 1.0 / (2.0 * std::f64::consts::PI * det.sqrt()) })
    }

    fn quad(&self, p: Vector2<f64>) -> f64 {
        let r = p - self.mean;
        (r.transpose() * self.inv * r)[(0, 0)]
    }

    fn pdf(&self, p: Vector2<f64>) -> f64 {
        self.norm * (-0.5 * self.quad(p)).exp()
    }
}

fn marginal(p: &MomentParam, (i, j): (usize, usize)) -> (Vector2<f64>, Matrix2<f64>) {
    let (mu, s) = (p.mean(), p.cov());
    (Vector2::new(mu[i], mu[j]), Matrix2::new(s[(i, i)], s[(i, j)], s[(j, i)], s[(j, j)]))
}

/// Builds the grid around the reference draws and evaluates the KDE plus each
/// named fit's bivariate marginal.
pub fn contour_grid(samples: &DMatrix<f64>, fits: &[(String, MomentParam)], spec: &ContourSpec) -> Result<ContourGrid> {
    let (i, j) = spec.pair;
    let d = samples.ncols();
    if i >= d || j >= d || i == j {
        return Err(Error::InvalidConfig(format!("pair ({i}, {j}) is not two distinct coordinates below {d}")));
    }
    if samples.nrows() < 2 || spec.points < 2 || spec.max_kde_samples < 2 {
        return Err(Error::InvalidConfig("contour grid needs at least two draws and two points per axis".into()));
    }
    for (_, f) in fits {
        if f.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: f.dim() });
        }
    }
    let stride = samples.nrows().div_ceil(spec.max_kde_samples);
    let pts: Vec<Vector2<f64>> =
        (0..samples.nrows()).step_by(stride).map(|r| Vector2::new(samples[(r, i)], samples[(r, j)])).collect();
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let cov = pts.iter().fold(Matrix2::zeros(), |a, p| a + (p - mean) * (p - mean).transpose()) / (n - 1.0);

    let axis = |k: usize| -> Vec<f64> {
        let sd = cov[(k, k)].sqrt();
        let lo = mean[k] - spec.half_width * sd;
        let h = 2.0 * spec.half_width * sd / (spec.points - 1) as f64;
        (0..spec.points).map(|a| lo + a as f64 * h).collect()
    };
    let (xs, ys) = (axis(0), axis(1));

    // Scott's rule in two dimensions: H = n^{-1/3} Σ.
    let kernel = Gauss2::new(Vector2::zeros(), cov * n.powf(-1.0 / 3.0))?;
    let surfaces: Vec<Gauss2> =
        fits.iter().map(|(_, f)| { let (m, c) = marginal(f, spec.pair); Gauss2::new(m, c) }).collect::<Result<_>>()?;

    let cells: Vec<Vector2<f64>> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| Vector2::new(x, y))).collect();
    let kde: Vec<f64> = cells
        .par_iter()
        .map(|&c| pts.iter().map(|p| kernel.pdf(c - p)).sum::<f64>() / n)
        .collect();
    let mut values = vec![kde];
    values.extend(surfaces.iter().map(|g| cells.iter().map(|&c| g.pdf(c)).collect()));
    let mut names = vec!["kde".to_string()];
    names.extend(fits.iter().map(|(name, _)| name.clone()));
    Ok(ContourGrid { pair: spec.pair, xs, ys, names, values })
}

impl ContourGrid {
    /// Long format, one grid cell per row: `theta{i+1},theta{j+1},kde,<fits…>`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("theta{},theta{}", self.pair.0 + 1, self.pair.1 + 1);
        for name in &self.names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (a, x) in self.xs.iter().enumerate() {
            for (b, y) in self.ys.iter().enumerate() {
                let _ = write!(out, "{x:?},{y:?}");
                for v in &self.values {
                    let _ = write!(out, ",{:?}", v[a * self.ys.len() + b]);
                }
                out.push('\n');
            }
        }
        out
    }
}
