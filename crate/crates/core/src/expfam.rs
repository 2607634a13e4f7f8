//! The full-covariance Gaussian written as an exponential family
//! `q_ψ(θ) = exp{ψᵀ s(θ) + g(ψ)}` with `h(θ) ≡ 0`.
//!
//! Every vector indexed by the statistics (`ψ`, `s(θ)`, the columns of `D(θ)`,
//! the IRLS right-hand side and normal matrix) shares one layout:
//!
//! * `d` squares `θ_1², …, θ_d²`,
//! * cross products in bands `k = 1, …, d−1`, each band listing
//!   `θ_j θ_{j+k}` for `j = 1, …, d−k`,
//! * `d` linear terms `θ_1, …, θ_d`.
//!
//! The matching natural parameter holds `−ω_jj / 2` on the squares,
//! `−ω_{j,j+k}` on the bands and `Ωμ` on the linear block, where `Ω = Σ⁻¹`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, cholesky_lower, cholesky_solve, log_det_from_cholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Index bookkeeping for the statistic layout of a `d`-dimensional Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatLayout {
    d: usize,
}

/// One nonzero entry of a column of `D(θ)`: `D[row, col] = coef · θ[var]`,
/// or just `coef` when `var` is `None`.
#[derive(Debug, Clone, Copy)]
pub struct JacobianEntry {
    pub row: usize,
    pub coef: f64,
    pub var: Option<usize>,
}

impl StatLayout {
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        Self { d }
    }

    /// Recovers `d` from `m = d(d+3)/2`.
    pub fn from_len(m: usize) -> Result<Self> {
        let mut d = 1;
        while d * (d + 3) / 2 < m {
            d += 1;
        }
        if d * (d + 3) / 2 != m {
            return Err(Error::InvalidData(format!("{m} is not a valid statistic length d(d+3)/2")));
        }
        Ok(Self { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.d * (self.d + 3) / 2
    }

    /// Number of entries in the square and band blocks.
    pub fn quad_len(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    /// Position of the statistic `θ_j θ_l` (0-based, any order of `j`, `l`).
    pub fn quad_index(&self, j: usize, l: usize) -> usize {
        let (j, l) = if j <= l { (j, l) } else { (l, j) };
        if j == l {
            return j;
        }
        let k = l - j;
        // bands 1..k-1 hold (d-1) + (d-2) + ... + (d-k+1) entries
        let before: usize = (1..k).map(|b| self.d - b).sum();
        self.d + before + j
    }

    pub fn linear_index(&self, j: usize) -> usize {
        self.quad_len() + j
    }

    /// `(j, l)` pairs in layout order for the quadratic block, with `j <= l`.
    pub fn quad_pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = (0..self.d).map(|j| (j, j)).collect();
        for k in 1..self.d {
            for j in 0..(self.d - k) {
                out.push((j, j + k));
            }
        }
        out
    }

    /// Sparse description of every column of `D(θ)`.
    pub fn jacobian_columns(&self) -> Vec<Vec<JacobianEntry>> {
        let mut cols = Vec::with_capacity(self.len());
        for (j, l) in self.quad_pairs() {
            if j == l {
                cols.push(vec![JacobianEntry { row: j, coef: 2.0, var: Some(j) }]);
            } else {
                cols.push(vec![
                    JacobianEntry { row: j, coef: 1.0, var: Some(l) },
                    JacobianEntry { row: l, coef: 1.0, var: Some(j) },
                ]);
            }
        }
        for j in 0..self.d {
            cols.push(vec![JacobianEntry { row: j, coef: 1.0, var: None }]);
        }
        cols
    }
}

/// Mean / covariance form. The covariance is exactly symmetric and positive
/// definite; construction fails otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentParam {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl MomentParam {
    /// Builds from a mean and a covariance, reading only the upper triangle of
    /// `sigma`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: sigma.nrows() });
        }
        let mut sym = sigma;
        for i in 0..d {
            for j in 0..i {
                sym[(i, j)] = sym[(j, i)];
            }
        }
        cholesky_lower(&sym)?;
        Ok(Self { mu, sigma: sym })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn cholesky(&self) -> DMatrix<f64> {
        cholesky_lower(&self.sigma).expect("covariance checked at construction")
    }

    pub fn to_natural(&self) -> NaturalParam {
        moment_to_natural(self).expect("covariance checked at construction")
    }
}

/// Serialized as `{"mu": [...], "sigma": [...row-major...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl From<&MomentParam> for MomentRecord {
    fn from(p: &MomentParam) -> Self {
        let d = p.dim();
        let mut sigma = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                sigma.push(p.sigma[(i, j)]);
            }
        }
        Self { mu: p.mu.iter().copied().collect(), sigma }
    }
}

impl TryFrom<MomentRecord> for MomentParam {
    type Error = Error;

    fn try_from(r: MomentRecord) -> Result<Self> {
        let d = r.mu.len();
        if r.sigma.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, found: r.sigma.len() });
        }
        MomentParam::new(DVector::from_vec(r.mu), DMatrix::from_row_slice(d, d, &r.sigma))
    }
}

/// Natural parameter vector `ψ` in the statistic layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParam {
    psi: DVector<f64>,
    layout: StatLayout,
}

impl NaturalParam {
    pub fn from_vector(psi: DVector<f64>) -> Result<Self> {
        let layout = StatLayout::from_len(psi.len())?;
        Ok(Self { psi, layout })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn layout(&self) -> StatLayout {
        self.layout
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.psi
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.psi
    }

    /// The precision matrix `Ω` implied by the square and band blocks.
    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut omega = DMatrix::zeros(d, d);
        for (idx, (j, l)) in self.layout.quad_pairs().into_iter().enumerate() {
            if j == l {
                omega[(j, j)] = -2.0 * self.psi[idx];
            } else {
                omega[(j, l)] = -self.psi[idx];
                omega[(l, j)] = -self.psi[idx];
            }
        }
        omega
    }

    /// The linear block, `Ωμ`.
    pub fn shift(&self) -> DVector<f64> {
        self.psi.rows(self.layout.quad_len(), self.dim()).into_owned()
    }

    pub fn to_moment(&self) -> Result<MomentParam> {
        natural_to_moment(self)
    }

    /// Gaussian log-normalizer `g(ψ) = −μᵀΩμ/2 + log|Ω|/2 − d log(2π)/2`.
    pub fn log_normalizer(&self) -> Result<f64> {
        let omega = self.precision();
        let l = cholesky_lower(&omega)?;
        let shift = self.shift();
        let mu = cholesky_solve(&l, &shift);
        Ok(-0.5 * shift.dot(&mu) + 0.5 * log_det_from_cholesky(&l) - 0.5 * self.dim() as f64 * LN_2PI)
    }
}

/// Values of `s(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats(pub DVector<f64>);

pub fn moment_to_natural(p: &MomentParam) -> Result<NaturalParam> {
    let d = p.dim();
    let layout = StatLayout::new(d);
    let l = cholesky_lower(&p.sigma)?;
    let omega = cholesky_inverse(&l);
    let shift = &omega * &p.mu;
    let mut psi = DVector::zeros(layout.len());
    for (idx, (j, k)) in layout.quad_pairs().into_iter().enumerate() {
        psi[idx] = if j == k { -0.5 * omega[(j, j)] } else { -omega[(j, k)] };
    }
    psi.rows_mut(layout.quad_len(), d).copy_from(&shift);
    Ok(NaturalParam { psi, layout })
}

pub fn natural_to_moment(psi: &NaturalParam) -> Result<MomentParam> {
    let omega = psi.precision();
    let l = cholesky_lower(&omega)?;
    let sigma = cholesky_inverse(&l);
    let mu = cholesky_solve(&l, &psi.shift());
    Ok(MomentParam { mu, sigma })
}

pub fn sufficient_stats(theta: &DVector<f64>) -> SufficientStats {
    let layout = StatLayout::new(theta.len());
    let mut s = DVector::zeros(layout.len());
    for (idx, (j, l)) in layout.quad_pairs().into_iter().enumerate() {
        s[idx] = theta[j] * theta[l];
    }
    s.rows_mut(layout.quad_len(), theta.len()).copy_from(theta);
    SufficientStats(s)
}

/// `D(θ)`, the `d × m` Jacobian of `s`.
pub fn stat_jacobian(theta: &DVector<f64>) -> DMatrix<f64> {
    let d = theta.len();
    let layout = StatLayout::new(d);
    let mut jac = DMatrix::zeros(d, layout.len());
    for (col, entries) in layout.jacobian_columns().into_iter().enumerate() {
        for e in entries {
            jac[(e.row, col)] = e.coef * e.var.map_or(1.0, |v| theta[v]);
        }
    }
    jac
}

/// `∇_θ log q_ψ(θ) = D(θ) ψ`, evaluated without forming `D`.
pub fn score(theta: &DVector<f64>, psi: &NaturalParam) -> DVector<f64> {
    let d = psi.dim();
    assert_eq!(theta.len(), d, "theta has wrong dimension");
    let layout = psi.layout();
    let p = psi.as_vector();
    let mut out = p.rows(layout.quad_len(), d).into_owned();
    for (idx, (j, l)) in layout.quad_pairs().into_iter().enumerate() {
        if j == l {
            out[j] += 2.0 * p[idx] * theta[j];
        } else {
            out[j] += p[idx] * theta[l];
            out[l] += p[idx] * theta[j];
        }
    }
    out
}

pub fn log_density(theta: &DVector<f64>, psi: &NaturalParam) -> Result<f64> {
    if theta.len() != psi.dim() {
        return Err(Error::DimensionMismatch { expected: psi.dim(), found: theta.len() });
    }
    let s = sufficient_stats(theta);
    Ok(psi.as_vector().dot(&s.0) + psi.log_normalizer()?)
}

/// `n × d` standard normal draws. Row `i` comes from its own ChaCha stream,
/// so the block is identical however it is later partitioned across threads.
pub fn standard_normals(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for j in 0..d {
            z[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    z
}

/// Maps standard normal rows `z` to draws `μ + L z` from `N(μ, Σ)`.
pub fn transform_normals(z: &DMatrix<f64>, p: &MomentParam) -> DMatrix<f64> {
    let l = p.cholesky();
    let mut out = z * l.transpose();
    for mut row in out.row_iter_mut() {
        row += p.mu.transpose();
    }
    out
}

/// `n` draws from `q_ψ` as rows of an `n × d` matrix.
pub fn sample(psi: &NaturalParam, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let p = psi.to_moment()?;
    Ok(transform_normals(&standard_normals(seed, n, p.dim()), &p))
}
