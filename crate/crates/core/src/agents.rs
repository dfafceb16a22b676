//! Agent strategies, the local-learning baseline and overall losses.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, FflError, Result};
use crate::model::{local_risk_and_grad, LocalDataset, LossModel, ModelVector, Scenario};

/// `(round, w, true_grad) -> report`
pub type HookFn = dyn Fn(usize, &[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// User-supplied report transformation.
#[derive(Clone)]
pub struct ReportHook(pub Arc<HookFn>);

impl fmt::Debug for ReportHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ReportHook(..)")
    }
}

/// How an agent turns its true gradient into the report it submits.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentStrategy {
    #[default]
    Faithful,
    Amplify {
        gamma: f64,
    },
    /// The agent does not participate; it is removed before the mechanism starts.
    OptOut,
    #[serde(skip)]
    Custom(ReportHook),
}

impl AgentStrategy {
    pub fn validate(&self) -> Result<()> {
        if let AgentStrategy::Amplify { gamma } = self {
            if !(gamma.is_finite() && *gamma > 0.0) {
                return Err(invalid(format!("amplification must be finite and positive, got {gamma}")));
            }
        }
        Ok(())
    }

    pub fn is_faithful(&self) -> bool {
        matches!(self, AgentStrategy::Faithful)
    }
}

/// The report submitted for `true_grad` at `round` and model `w`.
pub fn report_gradient(
    strategy: &AgentStrategy,
    round: usize,
    w: &[f64],
    true_grad: &ModelVector,
) -> Result<ModelVector> {
    match strategy {
        AgentStrategy::Faithful => Ok(true_grad.clone()),
        AgentStrategy::Amplify { gamma } => Ok(true_grad.scaled(*gamma)),
        AgentStrategy::OptOut => Err(invalid("opted-out agents do not report")),
        AgentStrategy::Custom(hook) => {
            let r = (hook.0)(round, w, true_grad);
            if r.len() != true_grad.dim() {
                return Err(FflError::DimensionMismatch {
                    expected: true_grad.dim(),
                    got: r.len(),
                });
            }
            Ok(ModelVector(r))
        }
    }
}

/// Iteration cap of [`local_learning`].
pub const LOCAL_LEARNING_CAP: usize = 1_000_000;

/// `w_k^L`: gradient descent with step `1/L_g` on `F_k` until `||grad F_k|| <= tol`.
pub fn local_learning(ds: &LocalDataset, model: &LossModel, tol: f64) -> Result<ModelVector> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if ds.is_empty() {
        return Err(FflError::EmptyDataset { agent: ds.owner });
    }
    let max_sq = ds.points.iter().map(|p| model.augmented_sq_norm(p)).fold(0.0, f64::max);
    let l_g = model.reg + model.curvature_factor() * max_sq;
    let eta = 1.0 / l_g;
    let mut w = ModelVector::zeros(model.dim());
    for _ in 0..LOCAL_LEARNING_CAP {
        let (_, g) = local_risk_and_grad(model, ds, &w, true)?;
        if g.norm() <= tol {
            return Ok(w);
        }
        w.axpy(-eta, &g);
    }
    Err(FflError::IterationCap {
        what: "local learning".into(),
        cap: LOCAL_LEARNING_CAP,
    })
}

/// `J_k = P_k + F_k(w)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallLoss {
    pub payment: f64,
    pub empirical_risk_at_outcome: f64,
    pub total: f64,
}

impl OverallLoss {
    pub fn new(payment: f64, risk: f64) -> Self {
        Self {
            payment,
            empirical_risk_at_outcome: risk,
            total: payment + risk,
        }
    }
}

pub fn overall_loss(payment: f64, model: &LossModel, ds: &LocalDataset, w_out: &[f64]) -> Result<OverallLoss> {
    let risk = crate::model::local_empirical_risk(model, ds, w_out)?;
    Ok(OverallLoss::new(payment, risk))
}

/// Participating sub-scenario after removing opted-out agents.
#[derive(Clone, Debug)]
pub struct Participation {
    pub scenario: Scenario,
    pub strategies: Vec<AgentStrategy>,
    /// Original indices of the participating agents.
    pub participants: Vec<usize>,
    pub opted_out: Vec<usize>,
}

/// Remove opted-out agents and renormalise the remaining weights.
pub fn apply_opt_out(scenario: &Scenario, strategies: &[AgentStrategy]) -> Result<Participation> {
    if strategies.len() != scenario.num_agents() {
        return Err(FflError::DimensionMismatch {
            expected: scenario.num_agents(),
            got: strategies.len(),
        });
    }
    for s in strategies {
        s.validate()?;
    }
    let participants: Vec<usize> = (0..strategies.len())
        .filter(|&k| !matches!(strategies[k], AgentStrategy::OptOut))
        .collect();
    let opted_out: Vec<usize> = (0..strategies.len())
        .filter(|&k| matches!(strategies[k], AgentStrategy::OptOut))
        .collect();
    if participants.is_empty() {
        return Err(invalid("every agent opted out"));
    }
    let total: f64 = participants.iter().map(|&k| scenario.weights[k]).sum();
    if !(total > 0.0) {
        return Err(invalid("participating agents carry zero weight"));
    }
    let sub = Scenario::new(
        participants.iter().map(|&k| scenario.datasets[k].clone()).collect(),
        participants.iter().map(|&k| scenario.weights[k] / total).collect(),
        scenario.loss.clone(),
        scenario
            .known_distributions
            .as_ref()
            .map(|d| participants.iter().map(|&k| d[k].clone()).collect()),
    )?;
    Ok(Participation {
        scenario: sub,
        strategies: participants.iter().map(|&k| strategies[k].clone()).collect(),
        participants,
        opted_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DataPoint;

    #[test]
    fn reports() {
        let g = ModelVector(vec![1.0, 2.0]);
        let w = [0.0, 0.0];
        assert_eq!(report_gradient(&AgentStrategy::Faithful, 0, &w, &g).unwrap(), g);
        assert_eq!(
            report_gradient(&AgentStrategy::Amplify { gamma: 3.0 }, 0, &w, &g).unwrap().0,
            vec![3.0, 6.0]
        );
        assert!(report_gradient(&AgentStrategy::OptOut, 0, &w, &g).is_err());
        let hook = AgentStrategy::Custom(ReportHook(Arc::new(|round, _w, g| {
            g.iter().map(|v| v + round as f64).collect()
        })));
        assert_eq!(report_gradient(&hook, 2, &w, &g).unwrap().0, vec![3.0, 4.0]);
        assert!(AgentStrategy::Amplify { gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn local_learning_closed_form() {
        let m = LossModel::ridge(1, 0.1, false);
        let ds = LocalDataset::new(0, vec![DataPoint::new(vec![1.0], 1.0)]);
        let w = local_learning(&ds, &m, 1e-10).unwrap();
        assert!((w[0] - 1.0 / 1.1).abs() < 1e-9);

        let zero = LocalDataset::new(0, vec![DataPoint::new(vec![0.4], 0.0), DataPoint::new(vec![-1.0], 0.0)]);
        let m = LossModel::ridge(1, 0.1, true);
        let w = local_learning(&zero, &m, 1e-10).unwrap();
        assert_eq!(w.norm(), 0.0);

        let ds = LocalDataset::new(0, vec![DataPoint::new(vec![0.4], 1.0), DataPoint::new(vec![-1.0], 2.0)]);
        let w = local_learning(&ds, &m, 1e-7).unwrap();
        assert!(crate::model::local_risk_grad(&m, &ds, &w).unwrap().norm() <= 1e-7);
    }

    #[test]
    fn overall_loss_is_additive() {
        let o = OverallLoss::new(0.0, 0.5);
        assert_eq!(o.total, 0.5);
        let o = OverallLoss::new(0.25, 0.5);
        assert_eq!(o.total, 0.75);
    }

    #[test]
    fn opt_out_renormalises() {
        let m = LossModel::ridge(1, 0.1, true);
        let mk = |k| LocalDataset::new(k, vec![DataPoint::new(vec![k as f64], 1.0)]);
        let s = Scenario::new(vec![mk(0), mk(1), mk(2)], vec![0.2, 0.3, 0.5], m, None).unwrap();
        let strategies = vec![AgentStrategy::Faithful, AgentStrategy::OptOut, AgentStrategy::Faithful];
        let p = apply_opt_out(&s, &strategies).unwrap();
        assert_eq!(p.participants, vec![0, 2]);
        assert_eq!(p.opted_out, vec![1]);
        assert!((p.scenario.weights[0] - 0.2 / 0.7).abs() < 1e-15);
        assert_eq!(p.scenario.num_agents(), 2);
    }
}
