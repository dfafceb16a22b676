//! Federated gradient descent followed by per-agent
//! incremental payments that approximate the weighted VCG payments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{report_gradient, AgentStrategy};
use crate::error::{invalid, FflError, Result};
use crate::mechanism::{MechanismKind, MechanismRun, Phase2Trace, RoundRecord, Termination, Trace};
use crate::model::{local_risk_and_grad, ConstantsCertificate, ModelVector, Scenario};

/// Configured a-priori bound on local-risk gradient norms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBound {
    pub l_f: f64,
    /// Rescale offending gradients to norm `l_f` instead of failing.
    #[serde(default)]
    pub clip: bool,
}

impl GradientBound {
    pub fn strict(l_f: f64) -> Self {
        Self { l_f, clip: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FflConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub t1: usize,
    pub t2: usize,
    pub epsilon: f64,
    pub phase2_cap: usize,
    /// Initial model `w[0]`; zero when absent.
    #[serde(default)]
    pub w0: Option<ModelVector>,
    pub gradient_bound: GradientBound,
    #[serde(default)]
    pub record_iterates: bool,
}

impl FflConfig {
    pub fn new(eta1: f64, eta2: f64, t1: usize, t2: usize, epsilon: f64, l_f: f64) -> Self {
        Self {
            eta1,
            eta2,
            t1,
            t2,
            epsilon,
            phase2_cap: default_phase2_cap(t2),
            w0: None,
            gradient_bound: GradientBound::strict(l_f),
            record_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0 && self.eta2 > 0.0) {
            return Err(invalid("step sizes must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if self.phase2_cap < self.t2 {
            return Err(invalid("phase2_cap must be at least t2"));
        }
        if !(self.gradient_bound.l_f > 0.0) {
            return Err(invalid("L_f must be positive"));
        }
        Ok(())
    }

    pub(crate) fn initial_model(&self, d: usize) -> Result<ModelVector> {
        match &self.w0 {
            Some(w) if w.dim() != d => Err(FflError::DimensionMismatch {
                expected: d,
                got: w.dim(),
            }),
            Some(w) => Ok(w.clone()),
            None => Ok(ModelVector::zeros(d)),
        }
    }
}

pub fn default_phase2_cap(t2: usize) -> usize {
    100 * t2 + 1000
}

/// Reports gathered from a set of agents at one iterate.
pub(crate) struct Collected {
    pub reports: Vec<(usize, ModelVector)>,
    /// `sum_j p_j F_j(w)` over the reporting agents (true values).
    pub loss: f64,
    pub clipped: bool,
}

pub(crate) fn collect_reports(
    scenario: &Scenario,
    strategies: &[AgentStrategy],
    bound: GradientBound,
    w: &ModelVector,
    members: &[usize],
    phase: &str,
    round: usize,
) -> Result<Collected> {
    let mut reports = Vec::with_capacity(members.len());
    let mut loss = 0.0;
    let mut clipped = false;
    for &j in members {
        let (f, mut g) = local_risk_and_grad(&scenario.loss, &scenario.datasets[j], w, true)?;
        loss += scenario.weights[j] * f;
        let n = g.norm();
        if n > bound.l_f {
            if !bound.clip {
                return Err(FflError::GradientBound {
                    phase: phase.into(),
                    round,
                    agent: j,
                    norm: n,
                    bound: bound.l_f,
                });
            }
            g = g.scaled(bound.l_f / n);
            clipped = true;
        }
        reports.push((j, report_gradient(&strategies[j], round, w, &g)?));
    }
    Ok(Collected {
        reports,
        loss,
        clipped,
    })
}

fn weighted_sum(scenario: &Scenario, reports: &[(usize, ModelVector)], d: usize) -> ModelVector {
    let mut s = ModelVector::zeros(d);
    for (j, r) in reports {
        s.axpy(scenario.weights[*j], r);
    }
    s
}

pub(crate) fn check_strategies(scenario: &Scenario, strategies: &[AgentStrategy]) -> Result<()> {
    if strategies.len() != scenario.num_agents() {
        return Err(FflError::DimensionMismatch {
            expected: scenario.num_agents(),
            got: strategies.len(),
        });
    }
    for s in strategies {
        s.validate()?;
        if matches!(s, AgentStrategy::OptOut) {
            return Err(invalid(
                "opted-out agents must be removed with apply_opt_out before running a mechanism",
            ));
        }
    }
    Ok(())
}

/// Phase I: `w[t+1] = w[t] - eta1 sum_k p_k report_k(w[t])` for `t1` rounds.
pub fn phase1_fedavg(
    scenario: &Scenario,
    strategies: &[AgentStrategy],
    cfg: &FflConfig,
) -> Result<(ModelVector, Trace, bool)> {
    cfg.validate()?;
    check_strategies(scenario, strategies)?;
    let d = scenario.dim();
    let all: Vec<usize> = (0..scenario.num_agents()).collect();
    let mut w = cfg.initial_model(d)?;
    let mut trace = Trace::default();
    let mut clipped = false;
    for t in 0..=cfg.t1 {
        let c = collect_reports(scenario, strategies, cfg.gradient_bound, &w, &all, "phase1", t)?;
        clipped |= c.clipped;
        let agg = weighted_sum(scenario, &c.reports, d);
        trace.records.push(RoundRecord {
            round: t,
            loss: c.loss,
            grad_norm: agg.norm(),
            running_payment: 0.0,
        });
        if cfg.record_iterates {
            trace.iterates.push(w.clone());
        }
        if t == cfg.t1 {
            break;
        }
        w.axpy(-cfg.eta1, &agg);
        if !w.is_finite() {
            return Err(FflError::Divergence {
                phase: "phase1".into(),
                round: t + 1,
            });
        }
    }
    Ok((w, trace, clipped))
}

/// Phase II for agent `k`, started from `w_star`.
pub fn phase2_payment(
    scenario: &Scenario,
    strategies: &[AgentStrategy],
    w_star: &ModelVector,
    cfg: &FflConfig,
    k: usize,
) -> Result<(f64, Phase2Trace, bool)> {
    cfg.validate()?;
    check_strategies(scenario, strategies)?;
    let k_total = scenario.num_agents();
    if k >= k_total {
        return Err(invalid(format!("agent {k} out of range")));
    }
    let others: Vec<usize> = (0..k_total).filter(|&j| j != k).collect();
    if others.is_empty() {
        return Ok((
            0.0,
            Phase2Trace {
                excluded: vec![k],
                iterations: 0,
                termination: Termination::NoOtherAgents,
                final_model: w_star.clone(),
                trace: Trace::default(),
            },
            false,
        ));
    }
    let pk = scenario.weights[k];
    if !(pk > 0.0) {
        return Err(invalid(format!("agent {k} has zero weight")));
    }
    let mu = scenario.loss.reg;
    let d = scenario.dim();
    let mut w = w_star.clone();
    let mut payment = 0.0;
    let mut trace = Trace::default();
    let mut clipped = false;
    let mut t = 0;
    let termination = loop {
        let c = collect_reports(scenario, strategies, cfg.gradient_bound, &w, &others, "phase2", t)?;
        clipped |= c.clipped;
        let g = weighted_sum(scenario, &c.reports, d);
        let gn = g.norm();
        trace.records.push(RoundRecord {
            round: t,
            loss: c.loss,
            grad_norm: gn,
            running_payment: payment,
        });
        if cfg.record_iterates {
            trace.iterates.push(w.clone());
        }
        let criterion = gn * gn / (2.0 * mu);
        if t >= cfg.t2 && criterion <= pk * cfg.epsilon {
            break Termination::CriterionMet;
        }
        if t >= cfg.phase2_cap {
            break Termination::CriterionUnmet;
        }
        let mut next = w.clone();
        next.axpy(-cfg.eta2, &g);
        if !next.is_finite() {
            return Err(FflError::Divergence {
                phase: format!("phase2 (agent {k})"),
                round: t + 1,
            });
        }
        // (w[t] - w[t+1])^T sum_{j != k} (p_j / p_k) report_j
        let step: f64 = w.iter().zip(next.iter()).zip(g.iter()).map(|((a, b), gi)| (a - b) * gi).sum();
        payment += step / pk;
        w = next;
        t += 1;
    };
    Ok((
        payment,
        Phase2Trace {
            excluded: vec![k],
            iterations: t,
            termination,
            final_model: w,
            trace,
        },
        clipped,
    ))
}

/// Faithful federated mechanism end to end. Phase II subproblems run in parallel.
pub fn run_ffl(scenario: &Scenario, strategies: &[AgentStrategy], cfg: &FflConfig) -> Result<MechanismRun> {
    let (w_star, phase1, mut clipped) = phase1_fedavg(scenario, strategies, cfg)?;
    let results: Vec<(f64, Phase2Trace, bool)> = (0..scenario.num_agents())
        .into_par_iter()
        .map(|k| phase2_payment(scenario, strategies, &w_star, cfg, k))
        .collect::<Result<_>>()?;
    let mut payments = Vec::with_capacity(results.len());
    let mut phase2 = Vec::with_capacity(results.len());
    for (p, tr, c) in results {
        payments.push(p);
        phase2.push(tr);
        clipped |= c;
    }
    Ok(MechanismRun {
        kind: MechanismKind::Ffl,
        w_star,
        payments,
        phase1,
        phase2,
        clipped,
        seed: None,
        noise: None,
        partition: None,
        payment_noise: Vec::new(),
        config: serde_json::to_value(cfg)?,
    })
}

/// Federated averaging without payments (the manipulation benchmark).
pub fn run_fedavg(scenario: &Scenario, strategies: &[AgentStrategy], cfg: &FflConfig) -> Result<MechanismRun> {
    let (w_star, phase1, clipped) = phase1_fedavg(scenario, strategies, cfg)?;
    Ok(MechanismRun {
        kind: MechanismKind::FedAvg,
        w_star,
        payments: vec![0.0; scenario.num_agents()],
        phase1,
        phase2: Vec::new(),
        clipped,
        seed: None,
        noise: None,
        partition: None,
        payment_noise: Vec::new(),
        config: serde_json::to_value(cfg)?,
    })
}

/// Raw Phase II iteration lower bound `ln((L_f + D mu)^2 L_g / (mu^2 K eps)) / ln(L_g / (L_g - mu))`.
pub fn theorem1_t2_lower(c: &ConstantsCertificate, k: usize, epsilon: f64, delta: f64) -> f64 {
    let num = ((c.l_f + delta * c.mu).powi(2) * c.l_g / (c.mu * c.mu * k as f64 * epsilon)).ln();
    if c.mu >= c.l_g {
        return if num > 0.0 { 0.0 } else { num };
    }
    num / (c.l_g / (c.l_g - c.mu)).ln()
}

/// `T2 = max(0, ceil(lower))`.
pub fn theorem1_t2(c: &ConstantsCertificate, k: usize, epsilon: f64, delta: f64) -> usize {
    let lower = theorem1_t2_lower(c, k, epsilon, delta);
    if lower <= 0.0 {
        0
    } else {
        lower.ceil() as usize
    }
}

/// Upper end of the admissible `T2` interval, `L_g eps K / (2 L_f^2)`.
pub fn theorem1_t2_upper(c: &ConstantsCertificate, k: usize, epsilon: f64) -> f64 {
    c.l_g * epsilon * k as f64 / (2.0 * c.l_f * c.l_f)
}

/// `T1 = max(0, ceil(2 ln(K G / D) / ln(1 / (1 - mu/L_g))))`.
pub fn theorem1_t1(c: &ConstantsCertificate, k: usize, delta: f64, g_estimate: f64) -> Result<usize> {
    if !(delta > 0.0) {
        return Err(invalid("the Phase I target must be positive to bound T1"));
    }
    let num = 2.0 * (k as f64 * g_estimate / delta).ln();
    if num <= 0.0 {
        return Ok(0);
    }
    if c.mu >= c.l_g {
        return Ok(1);
    }
    Ok((num / (1.0 / (1.0 - c.mu / c.l_g)).ln()).ceil() as usize)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem1Plan {
    pub config: FflConfig,
    pub t2_lower: f64,
    pub t2_upper: f64,
}

/// Step sizes and iteration counts for equal weights.
pub fn plan_hyperparams_theorem1(
    c: &ConstantsCertificate,
    k: usize,
    epsilon: f64,
    delta: f64,
    g_estimate: f64,
) -> Result<Theorem1Plan> {
    c.validate()?;
    if k == 0 || !(epsilon > 0.0) || !(delta >= 0.0) {
        return Err(invalid("need K >= 1, epsilon > 0, delta >= 0"));
    }
    let t2_lower = theorem1_t2_lower(c, k, epsilon, delta);
    let t2_upper = theorem1_t2_upper(c, k, epsilon);
    let t2 = theorem1_t2(c, k, epsilon, delta);
    if t2 as f64 > t2_upper {
        return Err(FflError::Infeasible(format!(
            "T2 interval [{t2_lower:.4}, {t2_upper:.4}] holds no integer; increase K or epsilon"
        )));
    }
    let t1 = theorem1_t1(c, k, delta, g_estimate)?;
    let cfg = FflConfig::new(1.0 / c.l_g, 1.0 / (k as f64 * c.l_g), t1, t2, epsilon, c.l_f);
    Ok(Theorem1Plan {
        config: cfg,
        t2_lower,
        t2_upper,
    })
}

/// Payment accuracy bound `((1 - p_k)/p_k) L_g L_f^2 (T + 1) eta2^2`.
pub fn payment_error_bound(p_k: f64, l_g: f64, l_f: f64, iterations: usize, eta2: f64) -> f64 {
    (1.0 - p_k) / p_k * l_g * l_f * l_f * (iterations as f64 + 1.0) * eta2 * eta2
}
