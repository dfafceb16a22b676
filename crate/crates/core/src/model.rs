//! Datasets, model vectors and the strongly convex loss families.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::distribution::KnownDistribution;
use crate::error::{invalid, FflError, Result};

/// One labelled sample. For classification losses `y` holds the class index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

impl DataPoint {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub owner: usize,
    pub points: Vec<DataPoint>,
}

impl LocalDataset {
    pub fn new(owner: usize, points: Vec<DataPoint>) -> Self {
        Self { owner, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Model parameters. Softmax models store the class weight rows contiguously.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(pub Vec<f64>);

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|v| a * v).collect())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        axpy(&mut self.0, a, x);
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for ModelVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    RidgeRegression,
    L2Logistic,
    L2Softmax,
}

/// A per-sample loss family with an l2 regulariser `(reg/2)||w||^2`.
///
/// When `intercept` is set every feature vector is augmented with a constant
/// 1 coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub reg: f64,
    pub dx: usize,
    pub num_classes: usize,
    pub intercept: bool,
}

impl LossModel {
    pub fn ridge(dx: usize, reg: f64, intercept: bool) -> Self {
        Self {
            kind: LossKind::RidgeRegression,
            reg,
            dx,
            num_classes: 1,
            intercept,
        }
    }

    pub fn logistic(dx: usize, reg: f64, intercept: bool) -> Self {
        Self {
            kind: LossKind::L2Logistic,
            reg,
            dx,
            num_classes: 2,
            intercept,
        }
    }

    pub fn softmax(dx: usize, num_classes: usize, reg: f64, intercept: bool) -> Self {
        Self {
            kind: LossKind::L2Softmax,
            reg,
            dx,
            num_classes,
            intercept,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(invalid(format!("regularisation must be positive, got {}", self.reg)));
        }
        if self.dx == 0 && !self.intercept {
            return Err(invalid("model has no parameters"));
        }
        if self.kind == LossKind::L2Softmax && self.num_classes < 2 {
            return Err(invalid("softmax needs at least two classes"));
        }
        Ok(())
    }

    /// Length of the augmented feature vector.
    pub fn feature_dim(&self) -> usize {
        self.dx + usize::from(self.intercept)
    }

    /// Number of model parameters `d`.
    pub fn dim(&self) -> usize {
        match self.kind {
            LossKind::L2Softmax => self.num_classes * self.feature_dim(),
            _ => self.feature_dim(),
        }
    }

    pub fn is_classification(&self) -> bool {
        self.kind != LossKind::RidgeRegression
    }

    /// Factor `c` in `L_g = reg + c * max ||x~||^2`.
    pub fn curvature_factor(&self) -> f64 {
        match self.kind {
            LossKind::RidgeRegression => 1.0,
            _ => 0.5,
        }
    }

    pub fn check_w(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(FflError::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        Ok(())
    }

    pub fn check_point(&self, pt: &DataPoint) -> Result<()> {
        if pt.x.len() != self.dx {
            return Err(FflError::DimensionMismatch {
                expected: self.dx,
                got: pt.x.len(),
            });
        }
        if self.is_classification() {
            let c = pt.y;
            if !(c >= 0.0 && c < self.num_classes as f64 && c.fract() == 0.0) {
                return Err(FflError::ClassOutOfRange {
                    class: c,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Squared norm of the augmented features.
    pub fn augmented_sq_norm(&self, pt: &DataPoint) -> f64 {
        dot(&pt.x, &pt.x) + if self.intercept { 1.0 } else { 0.0 }
    }

    fn reg_value(&self, w: &[f64]) -> f64 {
        0.5 * self.reg * dot(w, w)
    }

    /// Loss `l(w, x, y)`.
    pub fn loss(&self, w: &[f64], pt: &DataPoint) -> Result<f64> {
        self.check_w(w)?;
        self.check_point(pt)?;
        Ok(self.data_term(w, pt, 0.0, None) + self.reg_value(w))
    }

    /// Exact gradient of [`LossModel::loss`] in `w`.
    pub fn grad(&self, w: &[f64], pt: &DataPoint) -> Result<ModelVector> {
        self.check_w(w)?;
        self.check_point(pt)?;
        let mut g = ModelVector(w.iter().map(|v| self.reg * v).collect());
        self.data_term(w, pt, 1.0, Some(&mut g));
        Ok(g)
    }

    /// Data part of the loss (no regulariser). When `grad` is given, adds
    /// `scale` times the data gradient into it.
    pub(crate) fn data_term(
        &self,
        w: &[f64],
        pt: &DataPoint,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let fd = self.feature_dim();
        match self.kind {
            LossKind::RidgeRegression => {
                let r = aug_dot(w, &pt.x, self.intercept) - pt.y;
                if let Some(g) = grad {
                    aug_axpy(g, scale * r, &pt.x, self.intercept);
                }
                0.5 * r * r
            }
            LossKind::L2Logistic => {
                let z = aug_dot(w, &pt.x, self.intercept);
                let y = pt.y;
                if let Some(g) = grad {
                    aug_axpy(g, scale * (sigmoid(z) - y), &pt.x, self.intercept);
                }
                softplus(z) - y * z
            }
            LossKind::L2Softmax => {
                let c = self.num_classes;
                let label = pt.y as usize;
                let mut z = vec![0.0; c];
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = aug_dot(&w[k * fd..(k + 1) * fd], &pt.x, self.intercept);
                }
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + s.ln();
                if let Some(g) = grad {
                    for k in 0..c {
                        let p = (z[k] - lse).exp();
                        let coef = p - if k == label { 1.0 } else { 0.0 };
                        aug_axpy(&mut g[k * fd..(k + 1) * fd], scale * coef, &pt.x, self.intercept);
                    }
                }
                lse - z[label]
            }
        }
    }

    /// Adds `scale` times the data-term Hessian into the dense row-major `h`.
    pub(crate) fn data_hessian(&self, w: &[f64], pt: &DataPoint, scale: f64, h: &mut [f64]) {
        let d = self.dim();
        let fd = self.feature_dim();
        let xt = augmented(&pt.x, self.intercept);
        match self.kind {
            LossKind::RidgeRegression | LossKind::L2Logistic => {
                let c = if self.kind == LossKind::RidgeRegression {
                    1.0
                } else {
                    let s = sigmoid(dot(w, &xt));
                    s * (1.0 - s)
                };
                let a = scale * c;
                for i in 0..fd {
                    let ai = a * xt[i];
                    for j in 0..fd {
                        h[i * d + j] += ai * xt[j];
                    }
                }
            }
            LossKind::L2Softmax => {
                let nc = self.num_classes;
                let z: Vec<f64> = (0..nc).map(|k| dot(&w[k * fd..(k + 1) * fd], &xt)).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let p: Vec<f64> = z.iter().map(|v| (v - m).exp() / s).collect();
                for a in 0..nc {
                    for b in 0..nc {
                        let mab = if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] };
                        if mab == 0.0 {
                            continue;
                        }
                        let coef = scale * mab;
                        for i in 0..fd {
                            let row = (a * fd + i) * d + b * fd;
                            let ci = coef * xt[i];
                            for j in 0..fd {
                                h[row + j] += ci * xt[j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Predicted class for classification losses.
    pub fn predict_class(&self, w: &[f64], x: &[f64]) -> usize {
        let fd = self.feature_dim();
        match self.kind {
            LossKind::RidgeRegression => 0,
            LossKind::L2Logistic => usize::from(aug_dot(w, x, self.intercept) > 0.0),
            LossKind::L2Softmax => {
                let mut best = 0;
                let mut best_z = f64::NEG_INFINITY;
                for k in 0..self.num_classes {
                    let z = aug_dot(&w[k * fd..(k + 1) * fd], x, self.intercept);
                    if z > best_z {
                        best_z = z;
                        best = k;
                    }
                }
                best
            }
        }
    }
}

fn aug_dot(w: &[f64], x: &[f64], intercept: bool) -> f64 {
    let s = dot(&w[..x.len()], x);
    if intercept {
        s + w[x.len()]
    } else {
        s
    }
}

fn aug_axpy(out: &mut [f64], a: f64, x: &[f64], intercept: bool) {
    axpy(&mut out[..x.len()], a, x);
    if intercept {
        out[x.len()] += a;
    }
}

fn augmented(x: &[f64], intercept: bool) -> Vec<f64> {
    let mut v = x.to_vec();
    if intercept {
        v.push(1.0);
    }
    v
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `F_k(w)`: mean per-sample loss over a local dataset.
pub fn local_empirical_risk(model: &LossModel, ds: &LocalDataset, w: &[f64]) -> Result<f64> {
    Ok(local_risk_and_grad(model, ds, w, false)?.0)
}

/// Gradient of `F_k` at `w`.
pub fn local_risk_grad(model: &LossModel, ds: &LocalDataset, w: &[f64]) -> Result<ModelVector> {
    Ok(local_risk_and_grad(model, ds, w, true)?.1)
}

/// `F_k(w)` and, when `with_grad`, its gradient (otherwise an empty vector).
pub fn local_risk_and_grad(
    model: &LossModel,
    ds: &LocalDataset,
    w: &[f64],
    with_grad: bool,
) -> Result<(f64, ModelVector)> {
    model.check_w(w)?;
    if ds.is_empty() {
        return Err(FflError::EmptyDataset { agent: ds.owner });
    }
    let inv_n = 1.0 / ds.len() as f64;
    let mut g = if with_grad {
        ModelVector::zeros(w.len())
    } else {
        ModelVector(Vec::new())
    };
    let mut value = 0.0;
    for pt in &ds.points {
        model.check_point(pt)?;
        let gref = if with_grad { Some(&mut g.0[..]) } else { None };
        value += model.data_term(w, pt, inv_n, gref);
    }
    value *= inv_n;
    value += model.reg_value(w);
    if with_grad {
        axpy(&mut g.0, model.reg, w);
    }
    Ok((value, g))
}

/// K agents' datasets with aggregation weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub datasets: Vec<LocalDataset>,
    pub weights: Vec<f64>,
    pub loss: LossModel,
    #[serde(default)]
    pub known_distributions: Option<Vec<KnownDistribution>>,
}

/// How agent weights are derived from sample counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    SampleProportional,
    Equal,
}

impl WeightScheme {
    pub fn weights(self, counts: &[usize]) -> Vec<f64> {
        match self {
            WeightScheme::Equal => vec![1.0 / counts.len() as f64; counts.len()],
            WeightScheme::SampleProportional => {
                let n: usize = counts.iter().sum();
                counts.iter().map(|&c| c as f64 / n as f64).collect()
            }
        }
    }
}

impl Scenario {
    pub fn new(
        datasets: Vec<LocalDataset>,
        weights: Vec<f64>,
        loss: LossModel,
        known_distributions: Option<Vec<KnownDistribution>>,
    ) -> Result<Self> {
        let s = Self {
            datasets,
            weights,
            loss,
            known_distributions,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.datasets.is_empty() {
            return Err(invalid("scenario has no agents"));
        }
        if self.weights.len() != self.datasets.len() {
            return Err(FflError::DimensionMismatch {
                expected: self.datasets.len(),
                got: self.weights.len(),
            });
        }
        if self.weights.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("weights sum to {total}, not 1")));
        }
        for (k, ds) in self.datasets.iter().enumerate() {
            if ds.is_empty() {
                return Err(FflError::EmptyDataset { agent: k });
            }
            for (i, pt) in ds.points.iter().enumerate() {
                self.loss.check_point(pt)?;
                if !pt.y.is_finite() || pt.x.iter().any(|v| !v.is_finite()) {
                    return Err(FflError::UnboundedFeatures { agent: k, index: i });
                }
            }
        }
        if let Some(d) = &self.known_distributions {
            if d.len() != self.datasets.len() {
                return Err(FflError::DimensionMismatch {
                    expected: self.datasets.len(),
                    got: d.len(),
                });
            }
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.datasets.len()
    }

    pub fn dim(&self) -> usize {
        self.loss.dim()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.len()).collect()
    }

    /// `n_(1)`, the smallest local dataset size.
    pub fn n_min(&self) -> usize {
        self.datasets.iter().map(|d| d.len()).min().unwrap_or(0)
    }

    pub fn total_samples(&self) -> usize {
        self.datasets.iter().map(|d| d.len()).sum()
    }

    /// Replace the weights, revalidating.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn local_risk(&self, k: usize, w: &[f64]) -> Result<f64> {
        local_empirical_risk(&self.loss, &self.datasets[k], w)
    }

    pub fn local_grad(&self, k: usize, w: &[f64]) -> Result<ModelVector> {
        local_risk_grad(&self.loss, &self.datasets[k], w)
    }

    /// `F(w) = sum_k p_k F_k(w)`.
    pub fn global_risk(&self, w: &[f64]) -> Result<f64> {
        self.combined_risk(&self.weights, w)
    }

    /// `sum_k c_k F_k(w)` for arbitrary nonnegative coefficients.
    pub fn combined_risk(&self, coef: &[f64], w: &[f64]) -> Result<f64> {
        let mut v = 0.0;
        for (k, &c) in coef.iter().enumerate() {
            if c != 0.0 {
                v += c * self.local_risk(k, w)?;
            }
        }
        Ok(v)
    }

    /// `sum_k c_k F_k(w)` and its gradient.
    pub fn combined_risk_and_grad(&self, coef: &[f64], w: &[f64]) -> Result<(f64, ModelVector)> {
        let mut v = 0.0;
        let mut g = ModelVector::zeros(w.len());
        for (k, &c) in coef.iter().enumerate() {
            if c != 0.0 {
                let (fk, gk) = local_risk_and_grad(&self.loss, &self.datasets[k], w, true)?;
                v += c * fk;
                g.axpy(c, &gk);
            }
        }
        Ok((v, g))
    }

    /// Largest squared augmented feature norm over all samples.
    pub fn max_sq_feature_norm(&self) -> f64 {
        self.datasets
            .iter()
            .flat_map(|d| d.points.iter())
            .map(|p| self.loss.augmented_sq_norm(p))
            .fold(0.0, f64::max)
    }

    /// Smoothness constant certified from the data.
    pub fn smoothness(&self) -> f64 {
        self.loss.reg + self.loss.curvature_factor() * self.max_sq_feature_norm()
    }
}

/// Constants consumed by the planners and bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsCertificate {
    /// Strong-convexity modulus.
    pub mu: f64,
    /// Smoothness constant of every local risk.
    pub l_g: f64,
    /// Per-sample gradient norm bound at the optimum (in-sample estimate).
    pub l_ell: f64,
    /// Configured bound on local-risk gradient norms along trajectories.
    pub l_f: f64,
}

impl ConstantsCertificate {
    pub fn new(mu: f64, l_g: f64, l_ell: f64, l_f: f64) -> Result<Self> {
        let c = Self { mu, l_g, l_ell, l_f };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.l_g, self.l_ell, self.l_f];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("constants must be positive and finite"));
        }
        if self.mu > self.l_g {
            return Err(invalid(format!("mu = {} exceeds L_g = {}", self.mu, self.l_g)));
        }
        Ok(())
    }
}

/// Certify `mu`, `L_g` and `L_ell` from the data; `l_f` is the configured
/// trajectory bound.
pub fn certify_constants(scenario: &Scenario, l_f: f64) -> Result<ConstantsCertificate> {
    scenario.validate()?;
    let mu = scenario.loss.reg;
    let l_g = scenario.smoothness();
    let w0 = crate::oracle::solve_exact(scenario, &scenario.weights, None, crate::oracle::DEFAULT_TOL)?;
    let l_ell = estimate_l_ell(scenario, &w0)?;
    ConstantsCertificate::new(mu, l_g, l_ell.max(f64::MIN_POSITIVE), l_f)
}

/// `max_i ||grad l(w, x_i, y_i)||` over all samples in the scenario.
pub fn estimate_l_ell(scenario: &Scenario, w: &[f64]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for ds in &scenario.datasets {
        for pt in &ds.points {
            best = best.max(scenario.loss.grad(w, pt)?.norm());
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: &[f64], y: f64) -> DataPoint {
        DataPoint::new(x.to_vec(), y)
    }

    #[test]
    fn ridge_values() {
        let m = LossModel::ridge(1, 0.1, false);
        assert_eq!(m.loss(&[0.0], &pt(&[1.0], 0.0)).unwrap(), 0.0);
        assert!((m.loss(&[1.0], &pt(&[0.0], 0.0)).unwrap() - 0.05).abs() < 1e-15);
        assert!((m.loss(&[2.0], &pt(&[0.5], 1.0)).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(m.grad(&[0.0], &pt(&[1.0], 0.0)).unwrap().0, vec![0.0]);
        assert!((m.grad(&[1.0], &pt(&[0.0], 0.0)).unwrap()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = LossModel::ridge(2, 0.1, true);
        assert!(matches!(
            m.loss(&[0.0, 0.0], &pt(&[1.0, 2.0], 0.0)),
            Err(FflError::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(m.grad(&[0.0; 3], &pt(&[1.0], 0.0)).is_err());
    }

    #[test]
    fn class_range_is_checked() {
        let m = LossModel::softmax(2, 3, 0.1, true);
        assert!(m.loss(&[0.0; 9], &pt(&[1.0, 2.0], 3.0)).is_err());
        assert!(m.loss(&[0.0; 9], &pt(&[1.0, 2.0], 2.0)).is_ok());
    }

    #[test]
    fn empirical_risk_specialisations() {
        let m = LossModel::ridge(1, 0.1, true);
        let p = pt(&[0.3], 1.2);
        let w = [0.7, -0.2];
        let one = LocalDataset::new(0, vec![p.clone()]);
        let two = LocalDataset::new(0, vec![p.clone(), p.clone()]);
        let l = m.loss(&w, &p).unwrap();
        assert!((local_empirical_risk(&m, &one, &w).unwrap() - l).abs() < 1e-15);
        assert!((local_empirical_risk(&m, &two, &w).unwrap() - l).abs() < 1e-15);
        let g = m.grad(&w, &p).unwrap();
        let g2 = local_risk_grad(&m, &two, &w).unwrap();
        assert!(g.distance(&g2) < 1e-15);
        let empty = LocalDataset::new(4, vec![]);
        assert!(matches!(
            local_empirical_risk(&m, &empty, &w),
            Err(FflError::EmptyDataset { agent: 4 })
        ));
    }

    #[test]
    fn smoothness_constants() {
        let ridge = LossModel::ridge(1, 0.1, false);
        let ds = LocalDataset::new(0, vec![pt(&[1.0], 0.5), pt(&[-0.5], 0.1)]);
        let s = Scenario::new(vec![ds], vec![1.0], ridge, None).unwrap();
        assert!((s.smoothness() - 1.1).abs() < 1e-15);

        let logistic = LossModel::logistic(2, 0.1, false);
        let ds = LocalDataset::new(0, vec![pt(&[2.0, 0.0], 1.0), pt(&[1.0, 1.0], 0.0)]);
        let s = Scenario::new(vec![ds], vec![1.0], logistic, None).unwrap();
        assert!((s.smoothness() - 2.1).abs() < 1e-15);

        let c = certify_constants(&s, 5.0).unwrap();
        assert_eq!(c.mu, 0.1);
        assert!((c.l_g - 2.1).abs() < 1e-15);
        assert!(c.l_ell > 0.0);
    }

    #[test]
    fn non_finite_features_rejected() {
        let m = LossModel::ridge(1, 0.1, true);
        let ds = LocalDataset::new(0, vec![pt(&[f64::INFINITY], 0.0)]);
        assert!(matches!(
            Scenario::new(vec![ds], vec![1.0], m, None),
            Err(FflError::UnboundedFeatures { agent: 0, index: 0 })
        ));
    }
}
