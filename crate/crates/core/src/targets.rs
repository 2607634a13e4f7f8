//! Unnormalized target densities and their scores.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::expfam::MomentParam;
use crate::linalg::cholesky_inverse;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// A differentiable unnormalized log density on `R^d`.
///
/// Implementations panic if handed a point of the wrong dimension; callers
/// validate dimensions once up front.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn log_unnorm(&self, theta: &DVector<f64>) -> f64;

    /// `∇ log π̃(θ)`.
    fn score(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// `(A, b)` when the score is exactly `Aθ + b`, i.e. the target is Gaussian.
    fn affine_score(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        None
    }

    fn as_logistic(&self) -> Option<&LogisticTarget> {
        None
    }
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(u))` without overflow.
pub fn log1p_exp(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Logistic-regression data: rows of `x` are observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    tau2: f64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<u8>, tau2: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidData("design matrix has no columns".into()));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidData(format!("response {bad} is not binary")));
        }
        if !(tau2 > 0.0) || !tau2.is_finite() {
            return Err(Error::InvalidData(format!("prior variance {tau2} must be positive")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "design matrix".into() });
        }
        let y = DVector::from_iterator(y.len(), y.into_iter().map(f64::from));
        Ok(Self { x, y, tau2 })
    }

    /// A dataset without observations; the posterior is then the prior.
    pub fn empty(d: usize, tau2: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(0, d), Vec::new(), tau2)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn with_tau2(mut self, tau2: f64) -> Result<Self> {
        if !(tau2 > 0.0) {
            return Err(Error::InvalidData(format!("prior variance {tau2} must be positive")));
        }
        self.tau2 = tau2;
        Ok(self)
    }

    /// Reads CSV with header `y,x1,...,xd`.
    pub fn from_csv_path(path: impl AsRef<Path>, tau2: f64) -> Result<Self> {
        let rdr = csv::Reader::from_path(path)?;
        Self::from_csv_reader(rdr, tau2)
    }

    pub fn from_csv_reader<R: std::io::Read>(mut rdr: csv::Reader<R>, tau2: f64) -> Result<Self> {
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("y") || headers.len() < 2 {
            return Err(Error::InvalidData("expected header `y,x1,...,xd`".into()));
        }
        let d = headers.len() - 1;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(Error::InvalidData(format!("row {} has {} fields, expected {}", line + 1, rec.len(), d + 1)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidData(format!("row {}: {e}: {s:?}", line + 1)))
            };
            let y = parse(&rec[0])?;
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidData(format!("row {}: response {y} is not 0 or 1", line + 1)));
            }
            ys.push(y as u8);
            for field in rec.iter().skip(1) {
                xs.push(parse(field)?);
            }
        }
        if ys.is_empty() {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        Self::new(DMatrix::from_row_slice(ys.len(), d, &xs), ys, tau2)
    }

    /// Writes the CSV form read by [`Dataset::from_csv_reader`]. Values use
    /// Rust's shortest round-trip float formatting.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.dim()).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![format!("{}", self.y[i] as u8)];
            row.extend((0..self.dim()).map(|j| format!("{:?}", self.x[(i, j)])));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Posterior of logistic regression under the prior `N(0, τ² I)`.
#[derive(Debug, Clone)]
pub struct LogisticTarget {
    data: Dataset,
}

pub fn logistic_target(data: Dataset) -> LogisticTarget {
    LogisticTarget { data }
}

impl LogisticTarget {
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn try_score(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(theta)?;
        Ok(self.score(theta))
    }

    pub fn try_log_unnorm(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check(theta)?;
        Ok(self.log_unnorm(theta))
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.data.dim() {
            return Err(Error::DimensionMismatch { expected: self.data.dim(), found: theta.len() });
        }
        Ok(())
    }
}

impl TargetModel for LogisticTarget {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn log_unnorm(&self, theta: &DVector<f64>) -> f64 {
        let eta = &self.data.x * theta;
        let lik: f64 = eta.iter().zip(self.data.y.iter()).map(|(&u, &y)| y * u - log1p_exp(u)).sum();
        lik - theta.norm_squared() / (2.0 * self.data.tau2)
    }

    fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.data.x * theta;
        let resid = DVector::from_iterator(eta.len(), eta.iter().zip(self.data.y.iter()).map(|(&u, &y)| y - logistic(u)));
        self.data.x.tr_mul(&resid) - theta / self.data.tau2
    }

    fn as_logistic(&self) -> Option<&LogisticTarget> {
        Some(self)
    }
}

/// A `d`-dimensional Gaussian target, mainly for checking that the solver is
/// exact on its own family.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(p: &MomentParam) -> Self {
        let precision = cholesky_inverse(&p.cholesky());
        Self { mean: p.mean().clone(), precision }
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_unnorm(&self, theta: &DVector<f64>) -> f64 {
        let r = theta - &self.mean;
        -0.5 * r.dot(&(&self.precision * &r))
    }

    fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (theta - &self.mean))
    }

    fn affine_score(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        Some((-self.precision.clone(), &self.precision * &self.mean))
    }
}

/// One-dimensional test densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target1D {
    StudentT { nu: f64 },
    NormalMixture { w: f64, mu1: f64, mu2: f64 },
    SkewNormal { alpha: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Target1D {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Target1D::StudentT { nu } if !(nu > 0.0) => Err(Error::InvalidConfig(format!("nu = {nu} must be positive"))),
            Target1D::NormalMixture { w, .. } if !(w > 0.0 && w <= 1.0) => {
                Err(Error::InvalidConfig(format!("mixture weight {w} must lie in (0, 1]")))
            }
            Target1D::Normal { sd, .. } if !(sd > 0.0) => Err(Error::InvalidConfig(format!("sd = {sd} must be positive"))),
            _ => Ok(()),
        }
    }

    pub fn log_unnorm_1d(&self, t: f64) -> f64 {
        match *self {
            Target1D::StudentT { nu } => -0.5 * (nu + 1.0) * (t * t / nu).ln_1p(),
            Target1D::NormalMixture { w, mu1, mu2 } => {
                let (a, b) = mixture_log_terms(t, w, mu1, mu2);
                log_add_exp(a, b)
            }
            Target1D::SkewNormal { alpha } => -0.5 * t * t + log_normal_cdf(alpha * t),
            Target1D::Normal { mean, sd } => -0.5 * ((t - mean) / sd).powi(2),
        }
    }

    pub fn score_1d(&self, t: f64) -> f64 {
        match *self {
            Target1D::StudentT { nu } => student_t_score(t, nu),
            Target1D::NormalMixture { w, mu1, mu2 } => mixture_score(t, w, mu1, mu2),
            Target1D::SkewNormal { alpha } => skew_normal_score(t, alpha),
            Target1D::Normal { mean, sd } => -(t - mean) / (sd * sd),
        }
    }

    /// Whether the density is symmetric about some point, and that point.
    pub fn symmetry_center(&self) -> Option<f64> {
        match *self {
            Target1D::StudentT { .. } => Some(0.0),
            Target1D::Normal { mean, .. } => Some(mean),
            Target1D::SkewNormal { alpha } if alpha == 0.0 => Some(0.0),
            Target1D::NormalMixture { w, mu1, .. } if w == 1.0 => Some(mu1),
            Target1D::NormalMixture { w, mu1, mu2 } if w == 0.5 => Some(0.5 * (mu1 + mu2)),
            _ => None,
        }
    }
}

impl TargetModel for Target1D {
    fn dim(&self) -> usize {
        1
    }

    fn log_unnorm(&self, theta: &DVector<f64>) -> f64 {
        assert_eq!(theta.len(), 1, "one-dimensional target");
        self.log_unnorm_1d(theta[0])
    }

    fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        assert_eq!(theta.len(), 1, "one-dimensional target");
        DVector::from_element(1, self.score_1d(theta[0]))
    }

    fn affine_score(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match *self {
            Target1D::Normal { mean, sd } => {
                let prec = 1.0 / (sd * sd);
                Some((DMatrix::from_element(1, 1, -prec), DVector::from_element(1, prec * mean)))
            }
            _ => None,
        }
    }
}

pub fn student_t_score(theta: f64, nu: f64) -> f64 {
    -(nu + 1.0) * theta / (nu + theta * theta)
}

fn mixture_log_terms(t: f64, w: f64, mu1: f64, mu2: f64) -> (f64, f64) {
    let a = w.ln() - 0.5 * (t - mu1).powi(2);
    let b = (1.0 - w).ln() - 0.5 * (t - mu2).powi(2);
    (a, b)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Score of `w N(μ₁, 1) + (1−w) N(μ₂, 1)`.
pub fn mixture_score(theta: f64, w: f64, mu1: f64, mu2: f64) -> f64 {
    let (a, b) = mixture_log_terms(theta, w, mu1, mu2);
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let total = ea + eb;
    let r1 = ea / total;
    let r2 = eb / total;
    -(theta - mu1) * r1 - (theta - mu2) * r2
}

/// `φ(x) / Φ(x)`.
pub fn normal_mills_inverse(x: f64) -> f64 {
    if x < -30.0 {
        x_neg_tail_ratio(x)
    } else {
        let phi = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
        phi / normal_cdf(x)
    }
}

// φ(x)/Φ(x) ≈ −x / (1 − 1/x² + 3/x⁴ − 15/x⁶ + 105/x⁸) for x → −∞
fn x_neg_tail_ratio(x: f64) -> f64 {
    -x / tail_series(x)
}

fn tail_series(x: f64) -> f64 {
    let r = 1.0 / (x * x);
    1.0 - r * (1.0 - r * (3.0 - r * (15.0 - r * 105.0)))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn log_normal_cdf(x: f64) -> f64 {
    if x < -30.0 {
        -0.5 * x * x - 0.5 * LN_2PI - (-x).ln() + tail_series(x).ln()
    } else {
        normal_cdf(x).ln()
    }
}

/// Score of the standard skew normal `2 φ(θ) Φ(αθ)`.
pub fn skew_normal_score(theta: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return -theta;
    }
    -theta + alpha * normal_mills_inverse(alpha * theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_score(target: &dyn TargetModel, theta: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(theta.len(), |r, _| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[r] += h;
            tm[r] -= h;
            (target.log_unnorm(&tp) - target.log_unnorm(&tm)) / (2.0 * h)
        })
    }

    fn random_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        let y = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        Dataset::new(x, y, 5.0).unwrap()
    }

    #[test]
    fn logistic_score_at_zero() {
        let data = random_dataset(30, 3, 1);
        let t = logistic_target(data.clone());
        let s = t.score(&DVector::zeros(3));
        let half = data.y().map(|y| y - 0.5);
        let expected = data.x().tr_mul(&half);
        assert!((s - expected).abs().max() < 1e-12);
    }

    #[test]
    fn logistic_single_observation() {
        let data = Dataset::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![1], 5.0).unwrap();
        let s = logistic_target(data).score(&DVector::zeros(2));
        assert_eq!(s.as_slice(), &[0.5, 0.0]);
    }

    #[test]
    fn logistic_dimension_mismatch() {
        let t = logistic_target(random_dataset(5, 2, 3));
        assert!(matches!(t.try_score(&DVector::zeros(3)), Err(Error::DimensionMismatch { expected: 2, found: 3 })));
    }

    #[test]
    fn dataset_validation() {
        let x = DMatrix::zeros(2, 2);
        assert!(Dataset::new(x.clone(), vec![0, 2], 5.0).is_err());
        assert!(Dataset::new(x.clone(), vec![0, 1], 0.0).is_err());
        assert!(Dataset::new(x, vec![0], 5.0).is_err());
    }

    #[test]
    fn logistic_score_matches_fd() {
        let t = logistic_target(random_dataset(40, 4, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let theta = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let diff = (t.score(&theta) - fd_score(&t, &theta, 1e-6)).abs().max();
            assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn log1p_exp_is_stable() {
        assert_eq!(log1p_exp(1000.0), 1000.0);
        assert!(log1p_exp(-1000.0) >= 0.0 && log1p_exp(-1000.0) < 1e-300);
        assert_abs_diff_eq!(log1p_exp(0.0), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn student_t_examples() {
        assert_eq!(student_t_score(1.0, 1.0), -1.0);
        assert_eq!(student_t_score(0.0, 3.0), 0.0);
        assert_eq!(student_t_score(2.0, 4.0), -1.25);
        let t = Target1D::StudentT { nu: 4.0 };
        let fd = fd_score(&t, &DVector::from_element(1, 2.0), 1e-6)[0];
        assert_abs_diff_eq!(fd, -1.25, epsilon = 1e-6);
    }

    #[test]
    fn student_t_score_is_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let t = rng.random_range(-50.0..50.0);
            let nu = rng.random_range(0.1..10.0);
            assert!((student_t_score(-t, nu) + student_t_score(t, nu)).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixture_examples() {
        assert!((mixture_score(-10.0, 0.75, 0.0, 2.5) - 10.0).abs() < 1e-6);
        for t in [-3.0, 0.0, 1.7, 40.0] {
            assert_eq!(mixture_score(t, 1.0, 0.3, 2.5), -(t - 0.3));
        }
        let target = Target1D::NormalMixture { w: 0.75, mu1: 0.0, mu2: 2.5 };
        let h = 1e-5;
        let fd = (target.log_unnorm_1d(1.0 + h) - target.log_unnorm_1d(1.0 - h)) / (2.0 * h);
        assert_abs_diff_eq!(mixture_score(1.0, 0.75, 0.0, 2.5), fd, epsilon = 1e-8);
    }

    #[test]
    fn skew_normal_examples() {
        assert_eq!(skew_normal_score(1.3, 0.0), -1.3);
        let expected = 2.0 * FRAC_1_SQRT_2PI / 0.5;
        assert_abs_diff_eq!(skew_normal_score(0.0, 2.0), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(skew_normal_score(0.0, 2.0), 1.59577, epsilon = 1e-5);
        let target = Target1D::SkewNormal { alpha: 6.0 };
        let fd = fd_score(&target, &DVector::from_element(1, -2.0), 1e-6)[0];
        assert_abs_diff_eq!(skew_normal_score(-2.0, 6.0), fd, epsilon = 1e-6);
    }

    #[test]
    fn mills_ratio_is_continuous_at_switch() {
        let inside = {
            let x: f64 = -30.0;
            FRAC_1_SQRT_2PI * (-0.5 * x * x).exp() / normal_cdf(x)
        };
        let tail = x_neg_tail_ratio(-30.0);
        assert!((inside - tail).abs() / tail < 1e-10);
        let lin = normal_cdf(-30.0).ln();
        assert!((lin - log_normal_cdf(-30.000_000_1)).abs() < 1e-5);
    }

    #[test]
    fn one_dimensional_scores_are_finite() {
        let targets = [
            Target1D::NormalMixture { w: 0.75, mu1: 0.0, mu2: 2.5 },
            Target1D::NormalMixture { w: 0.01, mu1: -50.0, mu2: 50.0 },
            Target1D::SkewNormal { alpha: 6.0 },
            Target1D::SkewNormal { alpha: -20.0 },
        ];
        for target in targets {
            for i in -1000..=1000 {
                let t = i as f64 * 0.1;
                assert!(target.score_1d(t).is_finite(), "{target:?} at {t}");
                assert!(target.log_unnorm_1d(t).is_finite(), "{target:?} at {t}");
            }
        }
    }

    #[test]
    fn one_dimensional_scores_match_fd() {
        let targets = [
            Target1D::StudentT { nu: 1.0 },
            Target1D::StudentT { nu: 4.0 },
            Target1D::NormalMixture { w: 0.75, mu1: 0.0, mu2: 2.5 },
            Target1D::SkewNormal { alpha: 2.0 },
            Target1D::SkewNormal { alpha: 6.0 },
            Target1D::Normal { mean: 1.0, sd: 2.0 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for target in targets {
            for _ in 0..200 {
                let t = DVector::from_element(1, rng.random_range(-5.0..5.0));
                let diff = (target.score(&t)[0] - fd_score(&target, &t, 1e-6)[0]).abs();
                assert!(diff < 1e-6, "{target:?} at {t}: {diff}");
            }
        }
    }

    #[test]
    fn gaussian_target_affine_score_matches_score() {
        let p = MomentParam::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let t = GaussianTarget::new(&p);
        let (a, b) = t.affine_score().unwrap();
        let theta = DVector::from_vec(vec![0.3, 0.7]);
        assert!((t.score(&theta) - (a * &theta + b)).abs().max() < 1e-12);
        let fd = fd_score(&t, &theta, 1e-6);
        assert!((t.score(&theta) - fd).abs().max() < 1e-6);
    }

    #[test]
    fn csv_round_trip() {
        let data = random_dataset(12, 3, 10);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y,x1,x2,x3\n"));
        let back = Dataset::from_csv_reader(csv::Reader::from_reader(buf.as_slice()), 5.0).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_rejects_bad_response() {
        let text = "y,x1\n2,0.5\n";
        assert!(Dataset::from_csv_reader(csv::Reader::from_reader(text.as_bytes()), 5.0).is_err());
        let text = "z,x1\n1,0.5\n";
        assert!(Dataset::from_csv_reader(csv::Reader::from_reader(text.as_bytes()), 5.0).is_err());
    }
}
