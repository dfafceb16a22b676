//! Closed-form risk, participation and privacy bounds.
//!
//! Functions taking a [`Scenario`] need its known generating distributions
//! and use the scenario's weights, sample counts and model dimension.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distribution::{l1_distance_mixtures, minimize_expected_risk, KnownDistribution};
use crate::dp::ClusterPartition;
use crate::error::{invalid, FflError, Result};
use crate::model::{ConstantsCertificate, Scenario};

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// `L_ell^2 d ln(2 m d / delta) / (4 mu)`; `m = 1` for single-agent bounds and
/// `m = K` for the union bounds.
fn estimation_unit(c: &ConstantsCertificate, d: usize, delta: f64, m: usize) -> f64 {
    let d = d as f64;
    c.l_ell * c.l_ell * d * (2.0 * m as f64 * d / delta).ln() / (4.0 * c.mu)
}

fn dists(s: &Scenario) -> Result<&[KnownDistribution]> {
    s.known_distributions.as_deref().ok_or(FflError::UnknownDistributions)
}

/// `sum_k p_k^2 / n_k * L_ell^2 d ln(2d/delta) / (4 mu)`.
pub fn bound_prop1(c: &ConstantsCertificate, weights: &[f64], counts: &[usize], d: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if weights.len() != counts.len() {
        return Err(FflError::DimensionMismatch {
            expected: counts.len(),
            got: weights.len(),
        });
    }
    if counts.contains(&0) {
        return Err(invalid("every agent needs at least one sample"));
    }
    let s: f64 = weights.iter().zip(counts).map(|(p, &n)| p * p / n as f64).sum();
    Ok(s * estimation_unit(c, d, delta, 1))
}

/// Local learning: `L_ell^2 d ln(2d/delta) / (4 mu n_k)`.
pub fn bound_corollary1(c: &ConstantsCertificate, n_k: usize, d: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if n_k == 0 {
        return Err(invalid("n_k must be positive"));
    }
    Ok(estimation_unit(c, d, delta, 1) / n_k as f64)
}

fn mixture<'a>(coef: &[f64], d: &'a [KnownDistribution]) -> Vec<(f64, &'a KnownDistribution)> {
    coef.iter().copied().zip(d.iter()).filter(|(c, _)| *c != 0.0).collect()
}

/// `|| P_k - sum_j coef_j P_j ||_1`.
fn distance_to_mixture(dists: &[KnownDistribution], k: usize, coef: &[f64]) -> Result<f64> {
    let mix = mixture(coef, dists);
    if mix.is_empty() {
        return Err(invalid("empty mixture"));
    }
    l1_distance_mixtures(&[(1.0, &dists[k])], &mix)
}

/// Federated-learning risk bound of agent `k`: Prop-1 term plus `2 ||P_k - sum p_j P_j||`.
pub fn bound_prop2(c: &ConstantsCertificate, s: &Scenario, k: usize, delta: f64) -> Result<f64> {
    bound_prop3(c, s, k, 1.0, delta)
}

/// Amplified-report weights `p~_k = gamma p_k / (1 + (gamma-1) p_k)`,
/// `p~_j = p_j / (1 + (gamma-1) p_k)`.
pub fn amplified_weights(weights: &[f64], k: usize, gamma: f64) -> Vec<f64> {
    let z = 1.0 + (gamma - 1.0) * weights[k];
    weights
        .iter()
        .enumerate()
        .map(|(j, p)| if j == k { gamma * p / z } else { p / z })
        .collect()
}

/// Risk bound of agent `k` when it amplifies its gradient reports by `gamma`.
pub fn bound_prop3(c: &ConstantsCertificate, s: &Scenario, k: usize, gamma: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid("gamma must be finite and positive"));
    }
    let ds = dists(s)?;
    if k >= s.num_agents() {
        return Err(invalid(format!("agent {k} out of range")));
    }
    let pt = amplified_weights(&s.weights, k, gamma);
    let counts = s.sample_counts();
    let est: f64 = pt.iter().zip(&counts).map(|(p, &n)| p * p / n as f64).sum();
    let dist = distance_to_mixture(ds, k, &pt)?;
    Ok(est * estimation_unit(c, s.dim(), delta, 1) + 2.0 * dist)
}

/// Social risk bound of local learning, `sum_k p_k / n_k * L_ell^2 d ln(2Kd/delta) / (4 mu)`.
pub fn bound_local_social(c: &ConstantsCertificate, weights: &[f64], counts: &[usize], d: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let s: f64 = weights.iter().zip(counts).map(|(p, &n)| p / n as f64).sum();
    Ok(s * estimation_unit(c, d, delta, counts.len()))
}

/// Social risk bound of federated learning over all agents.
pub fn bound_federated_social(c: &ConstantsCertificate, s: &Scenario, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let ds = dists(s)?;
    let counts = s.sample_counts();
    let est: f64 = s.weights.iter().zip(&counts).map(|(p, &n)| p * p / n as f64).sum();
    let mut dist = 0.0;
    for k in 0..s.num_agents() {
        dist += 2.0 * s.weights[k] * distance_to_mixture(ds, k, &s.weights)?;
    }
    Ok(est * estimation_unit(c, s.dim(), delta, counts.len()) + dist)
}

/// Intra-cluster learning bound
/// `sum_k p_k p_{k,C(k)} / n_k * unit + sum_k 2 p_k ||P_k - Pbar_{C(k)}||`.
pub fn bound_cluster_rb(c: &ConstantsCertificate, s: &Scenario, partition: &ClusterPartition, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let ds = dists(s)?;
    let k_total = s.num_agents();
    partition.validate(k_total)?;
    let counts = s.sample_counts();
    let unit = estimation_unit(c, s.dim(), delta, k_total);
    let mut est = 0.0;
    let mut dist = 0.0;
    for cl in &partition.clusters {
        let mass: f64 = cl.iter().map(|&j| s.weights[j]).sum();
        if !(mass > 0.0) {
            return Err(invalid("cluster with zero weight"));
        }
        let mut coef = vec![0.0; k_total];
        for &j in cl {
            coef[j] = s.weights[j] / mass;
        }
        for &k in cl {
            est += s.weights[k] * coef[k] / counts[k] as f64;
            dist += 2.0 * s.weights[k] * distance_to_mixture(ds, k, &coef)?;
        }
    }
    Ok(est * unit + dist)
}

/// Participation bounds of agent `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipationBounds {
    /// Local learning.
    pub rb_local: f64,
    /// Participation in the mechanism (approximate inequality).
    pub rb_ffl: f64,
    /// `sum_{j != k} (p_j/p_k) min E_j - min sum_{j != k} (p_j/p_k) E_j`, shared by both.
    pub optimum_gap: f64,
}

/// `RB^L_{k,delta}` and `RB^FFL_{k,delta}` for a ridge scenario.
pub fn bound_participation(c: &ConstantsCertificate, s: &Scenario, k: usize, delta: f64) -> Result<ParticipationBounds> {
    check_delta(delta)?;
    let ds = dists(s)?;
    let k_total = s.num_agents();
    if k >= k_total {
        return Err(invalid(format!("agent {k} out of range")));
    }
    let p = &s.weights;
    let pk = p[k];
    let counts = s.sample_counts();
    let unit = estimation_unit(c, s.dim(), delta, k_total);

    let mut optimum_gap = 0.0;
    let mut rest_dist = 0.0;
    if k_total > 1 {
        let mut ratio = vec![0.0; k_total];
        for j in (0..k_total).filter(|&j| j != k) {
            ratio[j] = p[j] / pk;
            optimum_gap += ratio[j] * minimize_expected_risk(&s.loss, &[(1.0, &ds[j])])?.1;
        }
        optimum_gap -= minimize_expected_risk(&s.loss, &mixture(&ratio, ds))?.1;
        let rest: f64 = 1.0 - pk;
        let coef: Vec<f64> = (0..k_total).map(|j| if j == k { 0.0 } else { p[j] / rest }).collect();
        for j in (0..k_total).filter(|&j| j != k) {
            rest_dist += 2.0 * p[j] * distance_to_mixture(ds, j, &coef)?;
        }
    }
    let mut local_est = pk / counts[k] as f64;
    for j in (0..k_total).filter(|&j| j != k) {
        local_est += p[j] * p[j] / (counts[j] as f64 * (1.0 - pk).powi(2));
    }
    let ffl_est: f64 = (0..k_total).map(|j| p[j] * p[j] / (counts[j] as f64 * pk)).sum();
    let mut all_dist = 0.0;
    for j in 0..k_total {
        all_dist += 2.0 * p[j] * distance_to_mixture(ds, j, p)?;
    }
    Ok(ParticipationBounds {
        rb_local: local_est * unit + optimum_gap + rest_dist,
        rb_ffl: ffl_est * unit + optimum_gap + all_dist,
        optimum_gap,
    })
}

/// `Phi(delta) = sum p_k^2/n_k L_ell^2 d ln(2d/delta)/(2 mu) + (2 L_g/mu)(1 - mu/L_g)^T1 gap`.
pub fn bound_phi(
    c: &ConstantsCertificate,
    weights: &[f64],
    counts: &[usize],
    d: usize,
    delta: f64,
    t1: usize,
    initial_gap: f64,
) -> Result<f64> {
    if !(initial_gap >= 0.0) {
        return Err(invalid("initial optimality gap must be nonnegative"));
    }
    let est = 2.0 * bound_prop1(c, weights, counts, d, delta)?;
    Ok(est + phase1_residual(c, t1, initial_gap))
}

/// `(2 L_g / mu) (1 - mu/L_g)^T1 gap`.
pub fn phase1_residual(c: &ConstantsCertificate, t1: usize, initial_gap: f64) -> f64 {
    2.0 * c.l_g / c.mu * (1.0 - c.mu / c.l_g).powf(t1 as f64) * initial_gap
}

/// Faithfulness slack `2 eps + K Phi(delta)`.
pub fn epsilon_tilde(epsilon: f64, k: usize, phi: f64) -> f64 {
    2.0 * epsilon + k as f64 * phi
}

/// Extra participation slack `(2 K L_g / mu)(1 - mu/L_g)^T1 gap`.
pub fn participation_phase1_slack(c: &ConstantsCertificate, k: usize, t1: usize, initial_gap: f64) -> f64 {
    k as f64 * phase1_residual(c, t1, initial_gap)
}

fn check_dp(k: usize, n_min: usize, alpha: f64, beta: f64) -> Result<()> {
    if k == 0 || n_min == 0 || !(alpha > 0.0) || !(beta > 0.0 && beta < 1.0) {
        return Err(invalid("need K, n >= 1, alpha > 0, beta in (0, 1)"));
    }
    Ok(())
}

/// Private-model risk bound, up to the unspecified constant `c1`:
/// `c1 L_f^2 d ln(K n) ln(1/beta) / (K n^2 alpha^2) + sum 1/n_k L_ell^2 d ln(2d/delta) / (2 mu K^2)`.
#[allow(clippy::too_many_arguments)]
pub fn bound_dp_risk(
    c: &ConstantsCertificate,
    counts: &[usize],
    alpha: f64,
    beta: f64,
    d: usize,
    delta: f64,
    c1: f64,
) -> Result<f64> {
    let k = counts.len();
    let n_min = counts.iter().copied().min().unwrap_or(0);
    check_dp(k, n_min, alpha, beta)?;
    let equal = vec![1.0 / k as f64; k];
    let est = 2.0 * bound_prop1(c, &equal, counts, d, delta)?;
    Ok(dp_noise_term(c, k, n_min, alpha, beta, d, c1 / k as f64) + est)
}

/// `D L_f^2 d ln(K n) ln(1/beta) / (n^2 alpha^2)`, the privacy cost in the
/// participation bound, up to the unspecified constant `D`.
pub fn bound_dp_participation_cost(
    c: &ConstantsCertificate,
    k: usize,
    n_min: usize,
    alpha: f64,
    beta: f64,
    d: usize,
    d_const: f64,
) -> Result<f64> {
    check_dp(k, n_min, alpha, beta)?;
    Ok(dp_noise_term(c, k, n_min, alpha, beta, d, d_const))
}

fn dp_noise_term(c: &ConstantsCertificate, k: usize, n_min: usize, alpha: f64, beta: f64, d: usize, scale: f64) -> f64 {
    let n = n_min as f64;
    scale * c.l_f * c.l_f * d as f64 * (k as f64 * n).ln() * (1.0 / beta).ln() / (n * n * alpha * alpha)
}

/// One evaluated bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub inputs: BTreeMap<String, f64>,
    pub value: f64,
    pub note: String,
}

impl BoundReport {
    pub fn new(name: &str, inputs: &[(&str, f64)], value: f64, note: &str) -> Self {
        Self {
            name: name.into(),
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            value,
            note: note.into(),
        }
    }
}

/// Rows `name,inputs,value,note` with inputs as `key=value` pairs joined by `;`.
pub fn write_bound_reports(path: &Path, reports: &[BoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "inputs", "value", "note"])?;
    for r in reports {
        let inputs = r.inputs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        w.write_record([r.name.as_str(), inputs.as_str(), &r.value.to_string(), r.note.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_two_agent_regression, TwoAgentRegressionSpec};

    fn consts() -> ConstantsCertificate {
        ConstantsCertificate::new(0.1, 2.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn prop1_worked_value_and_reductions() {
        let c = consts();
        let counts = [50usize, 400];
        let w = [50.0 / 450.0, 400.0 / 450.0];
        let v = bound_prop1(&c, &w, &counts, 1, 0.01).unwrap();
        assert!((v - 200f64.ln() / (0.4 * 450.0)).abs() < 1e-12);
        assert!((v - 0.02944).abs() < 1e-5);
        let single = bound_prop1(&c, &[1.0], &[50], 3, 0.05).unwrap();
        assert!((single - bound_corollary1(&c, 50, 3, 0.05).unwrap()).abs() < 1e-15);
        assert!(bound_prop1(&c, &w, &counts, 1, 1.0).is_err());
    }

    #[test]
    fn prop3_limits() {
        let s = gen_two_agent_regression(&TwoAgentRegressionSpec::new(50, 400, 0.1, 2)).unwrap();
        let c = consts();
        let p2 = bound_prop2(&c, &s, 0, 0.01).unwrap();
        assert!((bound_prop3(&c, &s, 0, 1.0, 0.01).unwrap() - p2).abs() < 1e-12);
        let inf = bound_prop3(&c, &s, 0, 1e6, 0.01).unwrap();
        let local = bound_corollary1(&c, 50, 2, 0.01).unwrap();
        assert!((inf - local).abs() < 1e-3);
        assert!(bound_prop2(&c, &Scenario { known_distributions: None, ..s }, 0, 0.01).is_err());
    }

    #[test]
    fn cluster_specialisations() {
        let s = gen_two_agent_regression(&TwoAgentRegressionSpec::new(50, 400, 2.0, 2)).unwrap();
        let c = consts();
        let single = bound_cluster_rb(&c, &s, &ClusterPartition::singletons(2), 0.01).unwrap();
        let local = bound_local_social(&c, &s.weights, &s.sample_counts(), s.dim(), 0.01).unwrap();
        assert!((single - local).abs() < 1e-12);
        let all = ClusterPartition { clusters: vec![vec![0, 1]] };
        let fed = bound_federated_social(&c, &s, 0.01).unwrap();
        assert!((bound_cluster_rb(&c, &s, &all, 0.01).unwrap() - fed).abs() < 1e-12);
    }

    #[test]
    fn phi_and_dp_terms() {
        let c = consts();
        let w = [0.5, 0.5];
        let n = [10, 20];
        let est = 2.0 * bound_prop1(&c, &w, &n, 2, 0.1).unwrap();
        let big = bound_phi(&c, &w, &n, 2, 0.1, 10_000, 3.0).unwrap();
        assert!((big - est).abs() < 1e-12);
        let g1 = phase1_residual(&c, 5, 1.0) * c.mu / (2.0 * c.l_g);
        let g2 = phase1_residual(&c, 10, 1.0) * c.mu / (2.0 * c.l_g);
        assert!((g2 - g1 * g1).abs() < 1e-15);

        let r = bound_dp_risk(&c, &[100, 100], 1e12, 0.01, 2, 0.1, 1.0).unwrap();
        let eq = 2.0 * bound_prop1(&c, &[0.5, 0.5], &[100, 100], 2, 0.1).unwrap();
        assert!((r - eq).abs() < 1e-12);
        let a = bound_dp_participation_cost(&c, 10, 100, 0.1, 0.01, 2, 1.0).unwrap();
        let b = bound_dp_participation_cost(&c, 10, 200, 0.1, 0.01, 2, 1.0).unwrap();
        assert!(b < a / 4.0 * (2000f64.ln() / 1000f64.ln()) + 1e-15);
    }

    #[test]
    fn report_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let r = BoundReport::new("prop1", &[("delta", 0.01)], 0.5, "probability 0.99");
        write_bound_reports(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("name,inputs,value,note\nprop1,delta=0.01,0.5,probability 0.99"));
    }
}
