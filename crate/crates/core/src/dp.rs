//! Cluster-based scalable VCG with Gaussian gradient and
//! payment noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::AgentStrategy;
use crate::error::{invalid, FflError, Result};
use crate::ffl::{check_strategies, collect_reports, GradientBound};
use crate::mechanism::{MechanismKind, MechanismRun, Phase2Trace, RoundRecord, Termination, Trace};
use crate::model::{ConstantsCertificate, ModelVector, Scenario};
use crate::rng::stream;

/// Noise variances and the zCDP bookkeeping behind them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub sigma_sq: f64,
    pub sigma_p_sq: f64,
    /// Total zCDP budget over every noisy release.
    pub rho: f64,
    /// Budget of one noisy gradient aggregation, `2 L_f^2 / (K^2 n^2 sigma^2)`.
    pub rho_gradient_step: f64,
    /// Budget of one noisy payment, `2 / (n^2 sigma_P^2)`.
    pub rho_payment: f64,
    pub gradient_releases: usize,
    pub payment_releases: usize,
    /// `rho + 2 sqrt(rho ln(1/beta))`, the converted DP level.
    pub alpha_converted: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `sigma_P^2 = sigma^2 K^3 / ((T1 + K T2) L_f^2)`.
pub fn sigma_p_sq_from_sigma(sigma_sq: f64, l_f: f64, k: usize, t1: usize, t2: usize) -> f64 {
    let k = k as f64;
    sigma_sq * k * k * k / ((t1 as f64 + k * t2 as f64) * l_f * l_f)
}

#[allow(clippy::too_many_arguments)]
fn zcdp_bookkeeping(
    sigma_sq: f64,
    sigma_p_sq: f64,
    l_f: f64,
    k: usize,
    n_min: usize,
    t1: usize,
    t2: usize,
    alpha: f64,
    beta: f64,
) -> NoiseCalibration {
    let kf = k as f64;
    let n = n_min as f64;
    let rho_gradient_step = 2.0 * l_f * l_f / (kf * kf * n * n * sigma_sq);
    let rho_payment = 2.0 / (n * n * sigma_p_sq);
    let gradient_releases = t1 + k * t2;
    let rho = gradient_releases as f64 * rho_gradient_step + kf * rho_payment;
    NoiseCalibration {
        sigma_sq,
        sigma_p_sq,
        rho,
        rho_gradient_step,
        rho_payment,
        gradient_releases,
        payment_releases: k,
        alpha_converted: rho + 2.0 * (rho * (1.0 / beta).ln()).sqrt(),
        alpha,
        beta,
    }
}

/// `sigma^2 = 16 L_f^2 (T1 + K T2) ln(1/beta) / (K^2 n^2 alpha^2)`,
/// `sigma_P^2 = 16 K ln(1/beta) / (n^2 alpha^2)`.
pub fn calibrate_noise(
    l_f: f64,
    k: usize,
    n_min: usize,
    t1: usize,
    t2: usize,
    alpha: f64,
    beta: f64,
) -> Result<NoiseCalibration> {
    if !(l_f > 0.0 && alpha > 0.0 && beta > 0.0 && beta < 1.0) || k == 0 || n_min == 0 {
        return Err(invalid("calibration needs L_f, alpha > 0, beta in (0,1), K, n >= 1"));
    }
    if t1 + k * t2 == 0 {
        return Err(invalid("calibration needs at least one noisy gradient release"));
    }
    let kf = k as f64;
    let n = n_min as f64;
    let lb = (1.0 / beta).ln();
    let sigma_sq = 16.0 * l_f * l_f * (t1 as f64 + kf * t2 as f64) * lb / (kf * kf * n * n * alpha * alpha);
    let sigma_p_sq = 16.0 * kf * lb / (n * n * alpha * alpha);
    let alt = sigma_p_sq_from_sigma(sigma_sq, l_f, k, t1, t2);
    assert!(
        (alt - sigma_p_sq).abs() <= 1e-9 * sigma_p_sq.max(1.0),
        "payment-noise routes disagree: {alt} vs {sigma_p_sq}"
    );
    Ok(zcdp_bookkeeping(sigma_sq, sigma_p_sq, l_f, k, n_min, t1, t2, alpha, beta))
}

/// Disjoint clusters covering the agents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterPartition {
    /// Each of `0..k` appears in exactly one nonempty cluster.
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for c in &self.clusters {
            if c.is_empty() {
                return Err(invalid("empty cluster"));
            }
            for &a in c {
                if a >= k {
                    return Err(invalid(format!("agent {a} out of range for K={k}")));
                }
                if seen[a] {
                    return Err(invalid(format!("agent {a} appears in two clusters")));
                }
                seen[a] = true;
            }
        }
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("agent {a} is in no cluster")));
        }
        Ok(())
    }

    /// Cluster sizes differ by at most one.
    pub fn is_balanced(&self) -> bool {
        let lo = self.clusters.iter().map(Vec::len).min().unwrap_or(0);
        let hi = self.clusters.iter().map(Vec::len).max().unwrap_or(0);
        hi - lo <= 1
    }

    pub fn cluster_of(&self, agent: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&agent))
    }

    pub fn singletons(k: usize) -> Self {
        Self {
            clusters: (0..k).map(|a| vec![a]).collect(),
        }
    }
}

/// Seeded shuffle, then round-robin into `l` clusters.
pub fn partition_clusters(k: usize, l: usize, seed: u64) -> Result<ClusterPartition> {
    if l == 0 || l > k {
        return Err(invalid(format!("need 1 <= L <= K, got L={l}, K={k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut stream(seed, "partition", 0));
    let mut clusters = vec![Vec::new(); l];
    for (i, a) in order.into_iter().enumerate() {
        clusters[i % l].push(a);
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    Ok(ClusterPartition { clusters })
}

/// `min(K, ceil(sqrt(L_g (K-1) / (2 eps)) L_f / mu))`, at least 1.
#[allow(non_snake_case)]
pub fn plan_L_theorem3(c: &ConstantsCertificate, k: usize, epsilon: f64) -> Result<usize> {
    c.validate()?;
    if !(epsilon > 0.0) || k == 0 {
        return Err(invalid("need epsilon > 0 and K >= 1"));
    }
    let v = (c.l_g * (k as f64 - 1.0) / (2.0 * epsilon)).sqrt() * c.l_f / c.mu;
    let l = if v >= k as f64 { k } else { v.ceil() as usize };
    Ok(l.clamp(1, k))
}

/// Weighted sum of the reports plus one `N(0, sd^2 I)` draw.
///
/// Takes the reports by value so they go out of scope with the aggregation.
pub fn secure_aggregate<R: Rng + ?Sized>(
    reports: Vec<ModelVector>,
    weights: &[f64],
    noise_sd: f64,
    rng: &mut R,
) -> Result<ModelVector> {
    if reports.len() != weights.len() {
        return Err(FflError::DimensionMismatch {
            expected: weights.len(),
            got: reports.len(),
        });
    }
    let d = match reports.first() {
        Some(r) => r.dim(),
        None => return Err(invalid("nothing to aggregate")),
    };
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(invalid("noise sd must be finite and nonnegative"));
    }
    let mut s = ModelVector::zeros(d);
    for (r, &p) in reports.iter().zip(weights) {
        if r.dim() != d {
            return Err(FflError::DimensionMismatch { expected: d, got: r.dim() });
        }
        s.axpy(p, r);
    }
    for v in s.0.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += noise_sd * z;
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseOverride {
    pub sigma_sq: f64,
    pub sigma_p_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub alpha: f64,
    pub beta: f64,
    pub num_clusters: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub t1: usize,
    pub t2: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub gradient_bound: GradientBound,
    #[serde(default)]
    pub w0: Option<ModelVector>,
    /// Replace the calibrated variances (for example with zeros).
    #[serde(default)]
    pub noise_override: Option<NoiseOverride>,
    #[serde(default)]
    pub record_iterates: bool,
}

impl DpConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha: f64,
        beta: f64,
        num_clusters: usize,
        eta1: f64,
        eta2: f64,
        t1: usize,
        t2: usize,
        epsilon: f64,
        seed: u64,
        l_f: f64,
    ) -> Self {
        Self {
            alpha,
            beta,
            num_clusters,
            eta1,
            eta2,
            t1,
            t2,
            epsilon,
            seed,
            gradient_bound: GradientBound::strict(l_f),
            w0: None,
            noise_override: None,
            record_iterates: false,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.epsilon > 0.0) {
            return Err(invalid("alpha and epsilon must be positive"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(invalid("beta must lie in (0, 1)"));
        }
        if self.num_clusters == 0 || self.num_clusters > k {
            return Err(invalid(format!("need 1 <= L <= K, got L={}, K={k}", self.num_clusters)));
        }
        if !(self.eta1 > 0.0 && self.eta2 > 0.0) {
            return Err(invalid("step sizes must be positive"));
        }
        if let Some(o) = self.noise_override {
            if !(o.sigma_sq >= 0.0 && o.sigma_p_sq >= 0.0 && o.sigma_sq.is_finite() && o.sigma_p_sq.is_finite()) {
                return Err(invalid("override variances must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn calibration(&self, scenario: &Scenario) -> Result<NoiseCalibration> {
        let k = scenario.num_agents();
        let n = scenario.n_min();
        let l_f = self.gradient_bound.l_f;
        match self.noise_override {
            Some(o) => Ok(zcdp_bookkeeping(
                o.sigma_sq, o.sigma_p_sq, l_f, k, n, self.t1, self.t2, self.alpha, self.beta,
            )),
            None => calibrate_noise(l_f, k, n, self.t1, self.t2, self.alpha, self.beta),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn noisy_descent(
    scenario: &Scenario,
    strategies: &[AgentStrategy],
    bound: GradientBound,
    start: ModelVector,
    members: &[usize],
    eta: f64,
    steps: usize,
    sd: f64,
    rng: &mut crate::rng::StreamRng,
    phase: &str,
    record_iterates: bool,
) -> Result<(ModelVector, Trace, bool)> {
    let weights: Vec<f64> = members.iter().map(|&j| scenario.weights[j]).collect();
    let mut w = start;
    let mut trace = Trace::default();
    let mut clipped = false;
    for t in 0..=steps {
        let c = collect_reports(scenario, strategies, bound, &w, members, phase, t)?;
        clipped |= c.clipped;
        if record_iterates {
            trace.iterates.push(w.clone());
        }
        if t == steps {
            trace.records.push(RoundRecord {
                round: t,
                loss: c.loss,
                grad_norm: f64::NAN,
                running_payment: 0.0,
            });
            break;
        }
        let reports = c.reports.into_iter().map(|(_, r)| r).collect();
        let agg = secure_aggregate(reports, &weights, sd, rng)?;
        trace.records.push(RoundRecord {
            round: t,
            loss: c.loss,
            grad_norm: agg.norm(),
            running_payment: 0.0,
        });
        w.axpy(-eta, &agg);
        if !w.is_finite() {
            return Err(FflError::Divergence {
                phase: phase.into(),
                round: t + 1,
            });
        }
    }
    Ok((w, trace, clipped))
}

/// Differentially private mechanism end to end.
pub fn run_dpffl(scenario: &Scenario, strategies: &[AgentStrategy], cfg: &DpConfig) -> Result<MechanismRun> {
    let k_total = scenario.num_agents();
    cfg.validate(k_total)?;
    check_strategies(scenario, strategies)?;
    let noise = cfg.calibration(scenario)?;
    let partition = partition_clusters(k_total, cfg.num_clusters, cfg.seed)?;
    if k_total > 1 {
        if let Some(l) = partition.clusters.iter().position(|c| c.len() == k_total) {
            return Err(FflError::EmptyComplement { cluster: l });
        }
    }
    let d = scenario.dim();
    let w0 = match &cfg.w0 {
        Some(w) if w.dim() != d => return Err(FflError::DimensionMismatch { expected: d, got: w.dim() }),
        Some(w) => w.clone(),
        None => ModelVector::zeros(d),
    };
    let sd = noise.sigma_sq.sqrt();
    let all: Vec<usize> = (0..k_total).collect();
    let mut rng1 = stream(cfg.seed, "dp/phase1", 0);
    let (w_star, phase1, mut clipped) = noisy_descent(
        scenario,
        strategies,
        cfg.gradient_bound,
        w0,
        &all,
        cfg.eta1,
        cfg.t1,
        sd,
        &mut rng1,
        "phase1",
        cfg.record_iterates,
    )?;

    let results: Vec<(ModelVector, Phase2Trace, bool)> = partition
        .clusters
        .par_iter()
        .enumerate()
        .map(|(l, c)| {
            let others: Vec<usize> = (0..k_total).filter(|j| !c.contains(j)).collect();
            if others.is_empty() {
                let tr = Phase2Trace {
                    excluded: c.clone(),
                    iterations: 0,
                    termination: Termination::NoOtherAgents,
                    final_model: w_star.clone(),
                    trace: Trace::default(),
                };
                return Ok((w_star.clone(), tr, false));
            }
            let mut rng = stream(cfg.seed, "dp/phase2", l as u64);
            let (w_l, trace, cl) = noisy_descent(
                scenario,
                strategies,
                cfg.gradient_bound,
                w_star.clone(),
                &others,
                cfg.eta2,
                cfg.t2,
                sd,
                &mut rng,
                "phase2",
                cfg.record_iterates,
            )?;
            let tr = Phase2Trace {
                excluded: c.clone(),
                iterations: cfg.t2,
                termination: Termination::FixedIterations,
                final_model: w_l.clone(),
                trace,
            };
            Ok((w_l, tr, cl))
        })
        .collect::<Result<_>>()?;

    let at_star: Vec<f64> = (0..k_total)
        .map(|j| scenario.local_risk(j, &w_star))
        .collect::<Result<_>>()?;
    let sd_p = noise.sigma_p_sq.sqrt();
    let mut payments = vec![0.0; k_total];
    let mut payment_noise = vec![0.0; k_total];
    let mut phase2 = Vec::with_capacity(results.len());
    for (l, (w_l, tr, cl)) in results.into_iter().enumerate() {
        clipped |= cl;
        let at_l: Vec<f64> = (0..k_total)
            .map(|j| scenario.local_risk(j, &w_l))
            .collect::<Result<_>>()?;
        for &k in &partition.clusters[l] {
            let pk = scenario.weights[k];
            if !(pk > 0.0) {
                return Err(invalid(format!("agent {k} has zero weight")));
            }
            let mut acc = 0.0;
            for j in (0..k_total).filter(|&j| j != k) {
                acc += scenario.weights[j] / pk * (at_star[j] - at_l[j]);
            }
            let z: f64 = stream(cfg.seed, "dp/payment", k as u64).sample(StandardNormal);
            payment_noise[k] = sd_p * z;
            payments[k] = acc + payment_noise[k];
        }
        phase2.push(tr);
    }
    Ok(MechanismRun {
        kind: MechanismKind::DpFfl,
        w_star,
        payments,
        phase1,
        phase2,
        clipped,
        seed: Some(cfg.seed),
        noise: Some(noise),
        partition: Some(partition),
        payment_noise,
        config: serde_json::to_value(cfg)?,
    })
}

/// Iteration count and expected payment-loss bound of the privacy/accuracy tradeoff.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop9Plan {
    /// `T1 = T2`.
    pub t: usize,
    pub bound: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `A >= B ln(1/C)`: zero iterations are optimal and the bound is `B + eps`.
    pub saturated: bool,
}

/// `A = 8 eta2 d L_f^2 (K+1) ln(1/beta) / (mu K^2 (K-1) n^2 alpha^2)`,
/// `B = (K-1) L_f^2 / (2 mu)`, `C = 1 - (K-1) mu eta2`,
/// `T = ceil(ln(B ln(1/C) / A) / ln(1/C))`,
/// `bound = A (1 + ln(B ln(1/C) / A)) / ln(1/C) + eps`.
#[allow(clippy::too_many_arguments)]
pub fn plan_tradeoff_prop9(
    c: &ConstantsCertificate,
    k: usize,
    n_min: usize,
    d: usize,
    alpha: f64,
    beta: f64,
    eta2: f64,
    epsilon: f64,
) -> Result<Prop9Plan> {
    c.validate()?;
    if k < 2 || n_min == 0 || d == 0 {
        return Err(invalid("need K >= 2, n >= 1, d >= 1"));
    }
    if !(alpha > 0.0 && beta > 0.0 && beta < 1.0 && eta2 > 0.0 && epsilon >= 0.0) {
        return Err(invalid("need alpha, eta2 > 0, beta in (0,1), epsilon >= 0"));
    }
    let kf = k as f64;
    if eta2 > 1.0 / ((kf - 1.0) * c.l_g) * (1.0 + 1e-12) {
        return Err(invalid(format!(
            "eta2 = {eta2} exceeds 1/((K-1) L_g) = {}",
            1.0 / ((kf - 1.0) * c.l_g)
        )));
    }
    let cc = 1.0 - (kf - 1.0) * c.mu * eta2;
    if !(cc > 0.0 && cc < 1.0) {
        return Err(invalid(format!("C = {cc} is outside (0, 1)")));
    }
    let n = n_min as f64;
    let a = 8.0 * eta2 * d as f64 * c.l_f * c.l_f * (kf + 1.0) * (1.0 / beta).ln()
        / (c.mu * kf * kf * (kf - 1.0) * n * n * alpha * alpha);
    let b = (kf - 1.0) * c.l_f * c.l_f / (2.0 * c.mu);
    let lc = (1.0 / cc).ln();
    let ratio = b * lc / a;
    if ratio <= 1.0 {
        return Ok(Prop9Plan {
            t: 0,
            bound: b + epsilon,
            a,
            b,
            c: cc,
            saturated: true,
        });
    }
    let t = (ratio.ln() / lc).ceil() as usize;
    Ok(Prop9Plan {
        t,
        bound: a * (1.0 + ratio.ln()) / lc + epsilon,
        a,
        b,
        c: cc,
        saturated: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_calibration() {
        let n = calibrate_noise(1.0, 10, 100, 80, 20, 0.1, 0.01).unwrap();
        let lb = 100f64.ln();
        assert!((n.sigma_sq - 16.0 * 280.0 * lb / (100.0 * 1e4 * 0.01)).abs() < 1e-12);
        assert!((n.sigma_sq - 2.0631).abs() < 1e-4);
        assert!((n.sigma_p_sq - 7.3683).abs() < 1e-4);
        // Gradient and payment releases split the budget evenly.
        let grad_total = n.gradient_releases as f64 * n.rho_gradient_step;
        assert!((grad_total - 10.0 * n.rho_payment).abs() < 1e-12);
        assert!((2.0 * (n.rho * lb).sqrt() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn variances_vanish_for_large_alpha() {
        let n = calibrate_noise(1.0, 10, 100, 80, 20, 1e8, 0.01).unwrap();
        assert!(n.sigma_sq < 1e-15 && n.sigma_p_sq < 1e-14);
    }

    #[test]
    fn partition_sizes() {
        let p = partition_clusters(18, 4, 7).unwrap();
        let mut sizes: Vec<usize> = p.clusters.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![4, 4, 5, 5]);
        p.validate(18).unwrap();
        assert_eq!(partition_clusters(5, 5, 1).unwrap().clusters.len(), 5);
        assert_eq!(partition_clusters(5, 1, 1).unwrap().clusters[0], vec![0, 1, 2, 3, 4]);
        assert!(partition_clusters(3, 4, 1).is_err());
        assert_eq!(partition_clusters(18, 4, 7).unwrap(), p);
    }

    #[test]
    fn theorem3_cluster_count() {
        let c = ConstantsCertificate::new(0.1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(plan_L_theorem3(&c, 10, 0.5).unwrap(), 10);
        assert_eq!(plan_L_theorem3(&c, 10, 1e12).unwrap(), 1);
        let c = ConstantsCertificate::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(plan_L_theorem3(&c, 101, 2.0).unwrap(), 5);
    }

    #[test]
    fn aggregation_noise() {
        let r = vec![ModelVector(vec![1.0, 2.0]), ModelVector(vec![3.0, 4.0])];
        let mut rng = stream(1, "test", 0);
        let s = secure_aggregate(r, &[0.25, 0.75], 0.0, &mut rng).unwrap();
        assert_eq!(s.0, vec![2.5, 3.5]);

        let sigma_sq: f64 = 2.5;
        let mut rng = stream(3, "test", 0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| secure_aggregate(vec![ModelVector::zeros(1)], &[1.0], sigma_sq.sqrt(), &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var / sigma_sq - 1.0).abs() < 0.05, "{var}");

        let a = secure_aggregate(vec![ModelVector::zeros(3)], &[1.0], 1.0, &mut stream(9, "x", 0)).unwrap();
        let b = secure_aggregate(vec![ModelVector::zeros(3)], &[1.0], 1.0, &mut stream(9, "x", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prop9_contraction_and_regimes() {
        let c = ConstantsCertificate::new(0.1, 1.0, 1.0, 1.0).unwrap();
        let p = plan_tradeoff_prop9(&c, 10, 100, 2, 1.0, 0.01, 0.1, 0.1).unwrap();
        assert!((p.c - 0.91).abs() < 1e-15);
        assert!(!p.saturated && p.t > 0);
        let s = plan_tradeoff_prop9(&c, 10, 100, 2, 1e-6, 0.01, 0.1, 0.1).unwrap();
        assert!(s.saturated);
        assert_eq!(s.t, 0);
        assert!((s.bound - (s.b + 0.1)).abs() < 1e-12);
        assert!(plan_tradeoff_prop9(&c, 10, 100, 2, 1.0, 0.01, 0.2, 0.1).is_err());
    }
}
