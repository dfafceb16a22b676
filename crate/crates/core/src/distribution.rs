//! Analytic generating distributions for synthetic regression scenarios.
//!
//! A [`KnownDistribution`] draws `x` uniformly from the box `[x_lo, x_hi]^dx`
//! and sets `y = slope . x + intercept + noise`, with truncated normal noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FflError, Result};
use crate::model::{DataPoint, LossKind, LossModel};
use crate::quadrature::{adaptive_piecewise, integrate_gl};

/// Minimum acceptance probability tolerated by the rejection sampler.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormal {
    pub fn new(mean: f64, sd: f64, lo: f64, hi: f64) -> Result<Self> {
        let t = Self { mean, sd, lo, hi };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(invalid(format!(
                "invalid truncation interval [{}, {}]",
                self.lo, self.hi
            )));
        }
        if !(self.sd > 0.0) || !self.mean.is_finite() {
            return Err(invalid("truncated normal needs finite mean and positive sd"));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        (self.lo - self.mean) / self.sd
    }

    fn beta(&self) -> f64 {
        (self.hi - self.mean) / self.sd
    }

    /// Probability mass of the untruncated normal inside `[lo, hi]`.
    pub fn mass(&self) -> f64 {
        normal_cdf(self.beta()) - normal_cdf(self.alpha())
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if t < self.lo || t > self.hi {
            return 0.0;
        }
        normal_pdf((t - self.mean) / self.sd) / (self.sd * self.mass())
    }

    /// Closed-form mean of the truncated distribution.
    pub fn analytic_mean(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        self.mean + self.sd * (normal_pdf(a) - normal_pdf(b)) / self.mass()
    }

    /// Closed-form variance of the truncated distribution.
    pub fn analytic_variance(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        let z = self.mass();
        let r = (normal_pdf(a) - normal_pdf(b)) / z;
        self.sd * self.sd * (1.0 + (a * normal_pdf(a) - b * normal_pdf(b)) / z - r * r)
    }

    /// `E[t^p]` for p in {0, 1, 2} by Gauss–Legendre quadrature.
    pub fn moment(&self, p: i32) -> f64 {
        integrate_gl(|t| t.powi(p) * self.pdf(t), self.lo, self.hi, 32, 8)
    }

    /// Rejection sampling from the untruncated normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let acc = self.mass();
        if !(acc >= MIN_ACCEPTANCE) {
            return Err(invalid(format!(
                "acceptance probability {acc:e} below {MIN_ACCEPTANCE:e}"
            )));
        }
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let t = self.mean + self.sd * z;
            if t >= self.lo && t <= self.hi {
                return Ok(t);
            }
        }
    }
}

/// Free-function form of [`TruncatedNormal::sample`].
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    TruncatedNormal::new(mean, sd, lo, hi)?.sample(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownDistribution {
    pub x_lo: f64,
    pub x_hi: f64,
    pub dx: usize,
    pub slope: Vec<f64>,
    pub intercept: f64,
    pub noise: TruncatedNormal,
}

/// First and second moments of `(x~, y)` under a distribution.
#[derive(Clone, Debug)]
pub struct RidgeMoments {
    /// `E[x~ x~^T]`
    pub xx: DMatrix<f64>,
    /// `E[x~ y]`
    pub xy: DVector<f64>,
    /// `E[y^2]`
    pub yy: f64,
}

impl RidgeMoments {
    fn zeros(fd: usize) -> Self {
        Self {
            xx: DMatrix::zeros(fd, fd),
            xy: DVector::zeros(fd),
            yy: 0.0,
        }
    }

    fn add_scaled(&mut self, c: f64, o: &RidgeMoments) {
        self.xx += &o.xx * c;
        self.xy += &o.xy * c;
        self.yy += c * o.yy;
    }
}

impl KnownDistribution {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(self.x_lo < self.x_hi) {
            return Err(invalid("empty feature box"));
        }
        if self.slope.len() != self.dx {
            return Err(FflError::DimensionMismatch {
                expected: self.dx,
                got: self.slope.len(),
            });
        }
        Ok(())
    }

    fn regression(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.slope).map(|(a, b)| a * b).sum::<f64>()
    }

    fn x_density(&self) -> f64 {
        (self.x_hi - self.x_lo).powi(-(self.dx as i32))
    }

    /// Joint density `p(x, y)`.
    pub fn density(&self, x: &[f64], y: f64) -> f64 {
        if x.iter().any(|v| *v < self.x_lo || *v > self.x_hi) {
            return 0.0;
        }
        self.x_density() * self.noise.pdf(y - self.regression(x))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DataPoint> {
        let x: Vec<f64> = (0..self.dx).map(|_| rng.random_range(self.x_lo..self.x_hi)).collect();
        let y = self.regression(&x) + self.noise.sample(rng)?;
        Ok(DataPoint::new(x, y))
    }

    /// Moments of the augmented features and labels, for a ridge model with
    /// the given intercept setting.
    pub fn ridge_moments(&self, intercept: bool) -> RidgeMoments {
        let dx = self.dx;
        let fd = dx + usize::from(intercept);
        let (a, b) = (self.x_lo, self.x_hi);
        let ex = integrate_gl(|t| t, a, b, 8, 1) / (b - a);
        let ex2 = integrate_gl(|t| t * t, a, b, 8, 1) / (b - a);
        let ek = self.noise.moment(1);
        let ek2 = self.noise.moment(2);

        let mut xx = DMatrix::zeros(fd, fd);
        let mut mean_xt = DVector::zeros(fd);
        for i in 0..dx {
            mean_xt[i] = ex;
            for j in 0..dx {
                xx[(i, j)] = if i == j { ex2 } else { ex * ex };
            }
        }
        if intercept {
            mean_xt[dx] = 1.0;
            for i in 0..dx {
                xx[(i, dx)] = ex;
                xx[(dx, i)] = ex;
            }
            xx[(dx, dx)] = 1.0;
        }
        // m(x) = intercept + slope . x, as a linear form in x~ plus a constant.
        let s = DVector::from_column_slice(&self.slope);
        let c = self.intercept;
        // E[x~ m(x)] = E[x~ x^T] s + c E[x~]
        let xm = xx.columns(0, dx) * &s + &mean_xt * c;
        let xy = &xm + &mean_xt * ek;
        // E[m^2] = s^T E[x x^T] s + 2c s^T E[x] + c^2
        let exx = xx.view((0, 0), (dx, dx));
        let em2 = (s.transpose() * exx * &s)[0] + 2.0 * c * ex * s.sum() + c * c;
        let em = c + ex * s.sum();
        let yy = em2 + 2.0 * em * ek + ek2;
        RidgeMoments { xx, xy, yy }
    }
}

fn ridge_only(model: &LossModel) -> Result<()> {
    if model.kind != LossKind::RidgeRegression {
        return Err(invalid("expected risk is only available for ridge models"));
    }
    Ok(())
}

fn mixture_moments(model: &LossModel, mix: &[(f64, &KnownDistribution)]) -> Result<(RidgeMoments, f64)> {
    ridge_only(model)?;
    let mut m = RidgeMoments::zeros(model.feature_dim());
    let mut total = 0.0;
    for (c, d) in mix {
        if d.dx != model.dx {
            return Err(FflError::DimensionMismatch {
                expected: model.dx,
                got: d.dx,
            });
        }
        m.add_scaled(*c, &d.ridge_moments(model.intercept));
        total += c;
    }
    Ok((m, total))
}

/// `sum_j c_j E_j(w)` for a ridge model.
pub fn expected_risk_mixture(
    model: &LossModel,
    mix: &[(f64, &KnownDistribution)],
    w: &[f64],
) -> Result<f64> {
    model.check_w(w)?;
    let (m, total) = mixture_moments(model, mix)?;
    let wv = DVector::from_column_slice(w);
    let quad = (wv.transpose() * &m.xx * &wv)[0];
    let lin = wv.dot(&m.xy);
    Ok(0.5 * (quad - 2.0 * lin + m.yy) + total * 0.5 * model.reg * wv.norm_squared())
}

/// `E_k(w)`, the expected ridge risk.
pub fn expected_risk(model: &LossModel, dist: &KnownDistribution, w: &[f64]) -> Result<f64> {
    expected_risk_mixture(model, &[(1.0, dist)], w)
}

/// Minimiser and minimum of `sum_j c_j E_j(w)`.
pub fn minimize_expected_risk(
    model: &LossModel,
    mix: &[(f64, &KnownDistribution)],
) -> Result<(Vec<f64>, f64)> {
    let (m, total) = mixture_moments(model, mix)?;
    let fd = model.feature_dim();
    let a = &m.xx + DMatrix::identity(fd, fd) * (total * model.reg);
    let chol = a.cholesky().ok_or(FflError::Singular)?;
    let w = chol.solve(&m.xy);
    let w: Vec<f64> = w.iter().copied().collect();
    let v = expected_risk_mixture(model, mix, &w)?;
    Ok((w, v))
}

/// L1 distance `int |p - q|` between two distributions.
pub fn l1_distance(p: &KnownDistribution, q: &KnownDistribution) -> Result<f64> {
    l1_distance_mixtures(&[(1.0, p)], &[(1.0, q)])
}

const L1_TOL: f64 = 1e-9;

/// L1 distance between two finite mixtures `sum a_i P_i` and `sum b_j Q_j`.
///
/// When every component shares the feature box and regression function the
/// integral reduces to one dimension over the noise; otherwise a two-level
/// adaptive rule over `(x, y)` is used (one-dimensional features only).
pub fn l1_distance_mixtures(
    a: &[(f64, &KnownDistribution)],
    b: &[(f64, &KnownDistribution)],
) -> Result<f64> {
    let all: Vec<&KnownDistribution> = a.iter().chain(b).map(|(_, d)| *d).collect();
    for d in &all {
        d.validate()?;
    }
    let first = all[0];
    let shared = all.iter().all(|d| {
        d.x_lo == first.x_lo
            && d.x_hi == first.x_hi
            && d.dx == first.dx
            && d.slope == first.slope
            && d.intercept == first.intercept
    });
    if shared {
        let f = |t: f64| {
            let pa: f64 = a.iter().map(|(c, d)| c * d.noise.pdf(t)).sum();
            let pb: f64 = b.iter().map(|(c, d)| c * d.noise.pdf(t)).sum();
            (pa - pb).abs()
        };
        let pts: Vec<f64> = all.iter().flat_map(|d| [d.noise.lo, d.noise.hi]).collect();
        return adaptive_piecewise(&f, pts, L1_TOL);
    }
    l1_general(a, b)
}

fn l1_general(a: &[(f64, &KnownDistribution)], b: &[(f64, &KnownDistribution)]) -> Result<f64> {
    let all: Vec<&KnownDistribution> = a.iter().chain(b).map(|(_, d)| *d).collect();
    if all.iter().any(|d| d.dx != 1) {
        return Err(FflError::Quadrature(
            "general L1 distance supports one-dimensional features only".into(),
        ));
    }
    let xs: Vec<f64> = all.iter().flat_map(|d| [d.x_lo, d.x_hi]).collect();
    let outer = |x: f64| {
        let inner = |y: f64| {
            let pa: f64 = a.iter().map(|(c, d)| c * d.density(&[x], y)).sum();
            let pb: f64 = b.iter().map(|(c, d)| c * d.density(&[x], y)).sum();
            (pa - pb).abs()
        };
        let ys: Vec<f64> = all
            .iter()
            .flat_map(|d| {
                let m = d.regression(&[x]);
                [m + d.noise.lo, m + d.noise.hi]
            })
            .collect();
        adaptive_piecewise(&inner, ys, 1e-8).unwrap_or(f64::NAN)
    };
    let v = adaptive_piecewise(&outer, xs, 1e-7)?;
    if !v.is_finite() {
        return Err(FflError::Quadrature("inner integral failed".into()));
    }
    Ok(v)
}
