//! Exact minimisers, exact VCG payments and outcome metrics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::OverallLoss;
use crate::dp::ClusterPartition;
use crate::error::{invalid, FflError, Result};
use crate::mechanism::MechanismRun;
use crate::model::{LocalDataset, LossKind, ModelVector, Scenario};

/// Default gradient-norm tolerance of the oracle.
pub const DEFAULT_TOL: f64 = 1e-12;

const NEWTON_CAP: usize = 200;

/// Minimise `sum_k coef_k F_k(w)`.
///
/// Ridge models solve the normal equations by Cholesky factorisation;
/// classification models run damped Newton from `start` (zero by default)
/// until the gradient norm is at most `tol`.
pub fn solve_exact(
    scenario: &Scenario,
    coef: &[f64],
    start: Option<&[f64]>,
    tol: f64,
) -> Result<ModelVector> {
    if coef.len() != scenario.num_agents() {
        return Err(FflError::DimensionMismatch {
            expected: scenario.num_agents(),
            got: coef.len(),
        });
    }
    if coef.iter().any(|c| *c < 0.0) || coef.iter().sum::<f64>() <= 0.0 {
        return Err(invalid("objective coefficients must be nonnegative and not all zero"));
    }
    match scenario.loss.kind {
        LossKind::RidgeRegression => solve_ridge(scenario, coef),
        _ => solve_newton(scenario, coef, start, tol),
    }
}

fn solve_ridge(scenario: &Scenario, coef: &[f64]) -> Result<ModelVector> {
    let m = &scenario.loss;
    let d = m.dim();
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let w0 = vec![0.0; d];
    for (ds, &c) in scenario.datasets.iter().zip(coef) {
        if c == 0.0 {
            continue;
        }
        let s = c / ds.len() as f64;
        for pt in &ds.points {
            m.data_hessian(&w0, pt, s, &mut a);
            let mut xt = pt.x.clone();
            if m.intercept {
                xt.push(1.0);
            }
            for (bi, xi) in b.iter_mut().zip(&xt) {
                *bi += s * xi * pt.y;
            }
        }
    }
    let total: f64 = coef.iter().sum();
    for i in 0..d {
        a[i * d + i] += total * m.reg;
    }
    let a = DMatrix::from_row_slice(d, d, &a);
    let chol = a.clone().cholesky().ok_or(FflError::Singular)?;
    let bv = DVector::from_column_slice(&b);
    let mut x = chol.solve(&bv);
    // One step of iterative refinement.
    let r = &bv - &a * &x;
    x += chol.solve(&r);
    Ok(ModelVector(x.iter().copied().collect()))
}

fn solve_newton(
    scenario: &Scenario,
    coef: &[f64],
    start: Option<&[f64]>,
    tol: f64,
) -> Result<ModelVector> {
    let m = &scenario.loss;
    let d = m.dim();
    let mut w = match start {
        Some(s) => {
            m.check_w(s)?;
            ModelVector(s.to_vec())
        }
        None => ModelVector::zeros(d),
    };
    let total: f64 = coef.iter().sum();
    let (mut f, mut g) = scenario.combined_risk_and_grad(coef, &w)?;
    for _ in 0..NEWTON_CAP {
        let gn = g.norm();
        if gn <= tol {
            return Ok(w);
        }
        let mut h = vec![0.0; d * d];
        for (ds, &c) in scenario.datasets.iter().zip(coef) {
            if c == 0.0 {
                continue;
            }
            let s = c / ds.len() as f64;
            for pt in &ds.points {
                m.data_hessian(&w, pt, s, &mut h);
            }
        }
        for i in 0..d {
            h[i * d + i] += total * m.reg;
        }
        let hm = DMatrix::from_row_slice(d, d, &h);
        let chol = hm.cholesky().ok_or(FflError::Singular)?;
        let step = chol.solve(&DVector::from_column_slice(&g));
        let decrement = step.dot(&DVector::from_column_slice(&g));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = w.clone();
            for (ci, si) in cand.iter_mut().zip(step.iter()) {
                *ci -= t * si;
            }
            let (fc, gc) = scenario.combined_risk_and_grad(coef, &cand)?;
            // Near the optimum function values stop resolving progress, so
            // full steps are accepted on gradient decrease once the Newton
            // decrement is below the resolution of `f`.
            let unresolved = decrement <= 1e3 * f64::EPSILON * f.abs().max(1.0);
            if fc <= f - 0.25 * t * decrement || (t == 1.0 && unresolved && gc.norm() < gn) {
                w = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if gn <= 1e3 * tol {
                return Ok(w);
            }
            return Err(FflError::IterationCap {
                what: "newton line search".into(),
                cap: 60,
            });
        }
    }
    if g.norm() <= tol {
        return Ok(w);
    }
    Err(FflError::IterationCap {
        what: "newton solve".into(),
        cap: NEWTON_CAP,
    })
}

/// Minimiser of the leave-one-out objective `sum_{j != k} p_j F_j`.
pub fn solve_leave_out(
    scenario: &Scenario,
    excluded: &[usize],
    start: Option<&[f64]>,
    tol: f64,
) -> Result<ModelVector> {
    let mut coef = scenario.weights.clone();
    for &k in excluded {
        coef[k] = 0.0;
    }
    solve_exact(scenario, &coef, start, tol)
}

/// High-precision optima and the weighted VCG payments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VcgOracle {
    pub w_global: ModelVector,
    /// Leave-one-out minimisers; `None` when agent k is the only agent.
    pub w_minus: Vec<Option<ModelVector>>,
    pub payments: Vec<f64>,
    pub tolerance: f64,
}

/// `P_k = (1/p_k)[sum_{j != k} p_j F_j(w0) - min_w sum_{j != k} p_j F_j(w)]`.
pub fn vcg_payments_exact(scenario: &Scenario) -> Result<VcgOracle> {
    vcg_payments_with(scenario, None, DEFAULT_TOL)
}

pub fn vcg_payments_with(scenario: &Scenario, start: Option<&[f64]>, tol: f64) -> Result<VcgOracle> {
    let k_total = scenario.num_agents();
    let w_global = solve_exact(scenario, &scenario.weights, start, tol)?;
    let local_at_global: Vec<f64> = (0..k_total)
        .map(|j| scenario.local_risk(j, &w_global))
        .collect::<Result<_>>()?;
    let per_agent: Vec<(Option<ModelVector>, f64)> = (0..k_total)
        .into_par_iter()
        .map(|k| {
            if k_total == 1 {
                return Ok((None, 0.0));
            }
            let pk = scenario.weights[k];
            if pk <= 0.0 {
                return Err(invalid(format!("agent {k} has zero weight")));
            }
            let wk = solve_leave_out(scenario, &[k], Some(&w_global), tol)?;
            let mut acc = 0.0;
            for j in (0..k_total).filter(|&j| j != k) {
                acc += scenario.weights[j] * (local_at_global[j] - scenario.local_risk(j, &wk)?);
            }
            Ok((Some(wk), acc / pk))
        })
        .collect::<Result<_>>()?;
    let (w_minus, payments) = per_agent.into_iter().unzip();
    Ok(VcgOracle {
        w_global,
        w_minus,
        payments,
        tolerance: tol,
    })
}

/// Exact scalable VCG payments for a cluster partition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalableVcg {
    pub w_global: ModelVector,
    /// Leave-cluster-out minimiser per cluster.
    pub w_cluster: Vec<ModelVector>,
    pub payments: Vec<f64>,
}

/// `P_k^S = (1/p_k) sum_{j != k} p_j (F_j(w0) - F_j(w0_l))`, `k in C_l`.
pub fn scalable_vcg_exact(scenario: &Scenario, partition: &ClusterPartition) -> Result<ScalableVcg> {
    scalable_vcg_with(scenario, partition, DEFAULT_TOL)
}

pub fn scalable_vcg_with(
    scenario: &Scenario,
    partition: &ClusterPartition,
    tol: f64,
) -> Result<ScalableVcg> {
    let k_total = scenario.num_agents();
    partition.validate(k_total)?;
    for (l, c) in partition.clusters.iter().enumerate() {
        if c.len() == k_total {
            return Err(FflError::EmptyComplement { cluster: l });
        }
    }
    let w_global = solve_exact(scenario, &scenario.weights, None, tol)?;
    let at_global: Vec<f64> = (0..k_total)
        .map(|j| scenario.local_risk(j, &w_global))
        .collect::<Result<_>>()?;
    let w_cluster: Vec<ModelVector> = partition
        .clusters
        .par_iter()
        .map(|c| solve_leave_out(scenario, c, Some(&w_global), tol))
        .collect::<Result<_>>()?;
    let mut payments = vec![0.0; k_total];
    for (l, c) in partition.clusters.iter().enumerate() {
        let at_cluster: Vec<f64> = (0..k_total)
            .map(|j| scenario.local_risk(j, &w_cluster[l]))
            .collect::<Result<_>>()?;
        for &k in c {
            let mut acc = 0.0;
            for j in (0..k_total).filter(|&j| j != k) {
                acc += scenario.weights[j] * (at_global[j] - at_cluster[j]);
            }
            payments[k] = acc / scenario.weights[k];
        }
    }
    Ok(ScalableVcg {
        w_global,
        w_cluster,
        payments,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaymentLoss {
    pub per_agent: Vec<f64>,
    pub max: f64,
}

/// `|P_k* - P_k^VCG|` per agent.
pub fn payment_accuracy_loss(run: &MechanismRun, oracle: &VcgOracle) -> Result<PaymentLoss> {
    payment_loss_against(&run.payments, &oracle.payments)
}

pub fn payment_loss_against(payments: &[f64], reference: &[f64]) -> Result<PaymentLoss> {
    if payments.len() != reference.len() {
        return Err(FflError::AgentSetMismatch {
            run: payments.len(),
            oracle: reference.len(),
        });
    }
    let per_agent: Vec<f64> = payments.iter().zip(reference).map(|(a, b)| (a - b).abs()).collect();
    let max = per_agent.iter().cloned().fold(0.0, f64::max);
    Ok(PaymentLoss { per_agent, max })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub global_loss: f64,
    pub per_agent_risk: Vec<f64>,
    /// Risk of each agent on its evaluation set.
    pub per_agent_eval_risk: Vec<f64>,
    /// Per-agent accuracy on the evaluation sets (classification only).
    pub per_agent_accuracy: Option<Vec<f64>>,
    /// `sum_k p_k acc_k` (classification only).
    pub weighted_accuracy: Option<f64>,
    pub overall: Option<Vec<OverallLoss>>,
}

/// Metrics of an outcome `w`. Evaluation sets default to the training sets.
pub fn evaluate_outcome(
    scenario: &Scenario,
    eval_sets: Option<&[LocalDataset]>,
    w: &[f64],
    payments: Option<&[f64]>,
) -> Result<OutcomeMetrics> {
    let m = &scenario.loss;
    let k_total = scenario.num_agents();
    let eval = eval_sets.unwrap_or(&scenario.datasets);
    if eval.len() != k_total {
        return Err(FflError::DimensionMismatch {
            expected: k_total,
            got: eval.len(),
        });
    }
    let per_agent_risk: Vec<f64> = (0..k_total)
        .map(|k| scenario.local_risk(k, w))
        .collect::<Result<_>>()?;
    let global_loss = per_agent_risk.iter().zip(&scenario.weights).map(|(f, p)| f * p).sum();
    let per_agent_eval_risk: Vec<f64> = eval
        .iter()
        .map(|ds| crate::model::local_empirical_risk(m, ds, w))
        .collect::<Result<_>>()?;
    let per_agent_accuracy = if m.is_classification() {
        Some(eval.iter().map(|ds| accuracy(scenario, ds, w)).collect::<Vec<f64>>())
    } else {
        None
    };
    let weighted_accuracy = per_agent_accuracy
        .as_ref()
        .map(|a| a.iter().zip(&scenario.weights).map(|(x, p)| x * p).sum());
    let overall = match payments {
        Some(p) => {
            if p.len() != k_total {
                return Err(FflError::AgentSetMismatch {
                    run: p.len(),
                    oracle: k_total,
                });
            }
            Some(
                p.iter()
                    .zip(&per_agent_risk)
                    .map(|(pay, risk)| OverallLoss::new(*pay, *risk))
                    .collect(),
            )
        }
        None => None,
    };
    Ok(OutcomeMetrics {
        global_loss,
        per_agent_risk,
        per_agent_eval_risk,
        per_agent_accuracy,
        weighted_accuracy,
        overall,
    })
}

/// Fraction of correctly classified points.
pub fn accuracy(scenario: &Scenario, ds: &LocalDataset, w: &[f64]) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let hits = ds
        .points
        .iter()
        .filter(|p| scenario.loss.predict_class(w, &p.x) == p.y as usize)
        .count();
    hits as f64 / ds.len() as f64
}

/// A-priori gradient bounds derived from the oracle optima.
///
/// `faithful` covers every iterate of faithful FFL runs with step
/// sizes at most `1/L_g`: Phase I stays within `G = ||w[0] - w0||` of `w0`,
/// and Phase II within `||w* - w0_{-k}||` of `w0_{-k}`. `strategic`
/// additionally covers the set of minimisers of every reweighted objective,
/// which lies within `max_j ||grad F_j(w0)|| / mu` of `w0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradientBoundCertificate {
    pub faithful: f64,
    pub strategic: f64,
    pub g_initial: f64,
}

pub fn certified_gradient_bound(
    scenario: &Scenario,
    oracle: &VcgOracle,
    w_init: &[f64],
) -> Result<GradientBoundCertificate> {
    let l_g = scenario.smoothness();
    let mu = scenario.loss.reg;
    let anchor = (0..scenario.num_agents())
        .map(|j| Ok(scenario.local_grad(j, &oracle.w_global)?.norm()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let g = oracle.w_global.distance(w_init);
    let spread = oracle
        .w_minus
        .iter()
        .flatten()
        .map(|w| oracle.w_global.distance(w))
        .fold(0.0, f64::max);
    let r_w = anchor / mu;
    Ok(GradientBoundCertificate {
        faithful: anchor + l_g * (g + 2.0 * spread),
        strategic: anchor + l_g * (g + 4.0 * r_w),
        g_initial: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DataPoint, LossModel};

    fn ds(owner: usize, pts: &[(f64, f64)]) -> LocalDataset {
        LocalDataset::new(
            owner,
            pts.iter().map(|(x, y)| DataPoint::new(vec![*x], *y)).collect(),
        )
    }

    #[test]
    fn ridge_single_point_closed_form() {
        let s = Scenario::new(vec![ds(0, &[(1.0, 1.0)])], vec![1.0], LossModel::ridge(1, 0.1, false), None)
            .unwrap();
        let w = solve_exact(&s, &[1.0], None, DEFAULT_TOL).unwrap();
        assert!((w[0] - 1.0 / 1.1).abs() < 1e-15);
        let zero = Scenario::new(
            vec![ds(0, &[(1.0, 0.0), (-2.0, 0.0)])],
            vec![1.0],
            LossModel::ridge(1, 0.1, true),
            None,
        )
        .unwrap();
        let w = solve_exact(&zero, &[1.0], None, DEFAULT_TOL).unwrap();
        assert!(w.norm() == 0.0);
    }

    #[test]
    fn two_agent_vcg_matches_hand_algebra() {
        // F_1 = 0.5 (w - 1)^2 + 0.05 w^2, F_2 = 0.5 (w - 3)^2 + 0.05 w^2.
        // w0 = 2/1.1, w0_{-1} = 3/1.1, and
        // P_1 = (p_2/p_1)[F_2(w0) - F_2(w0_{-1})] with p = (0.5, 0.5).
        let s = Scenario::new(
            vec![ds(0, &[(1.0, 1.0)]), ds(1, &[(1.0, 3.0)])],
            vec![0.5, 0.5],
            LossModel::ridge(1, 0.1, false),
            None,
        )
        .unwrap();
        let f2 = |w: f64| 0.5 * (w - 3.0) * (w - 3.0) + 0.05 * w * w;
        let f1 = |w: f64| 0.5 * (w - 1.0) * (w - 1.0) + 0.05 * w * w;
        let w0 = 2.0 / 1.1;
        let p1 = f2(w0) - f2(3.0 / 1.1);
        let p2 = f1(w0) - f1(1.0 / 1.1);
        let o = vcg_payments_exact(&s).unwrap();
        assert!((o.w_global[0] - w0).abs() < 1e-12);
        assert!((o.payments[0] - p1).abs() < 1e-9);
        assert!((o.payments[1] - p2).abs() < 1e-9);
    }

    #[test]
    fn degenerate_vcg_cases() {
        let one = Scenario::new(vec![ds(0, &[(1.0, 2.0)])], vec![1.0], LossModel::ridge(1, 0.1, true), None)
            .unwrap();
        assert_eq!(vcg_payments_exact(&one).unwrap().payments, vec![0.0]);

        let same = Scenario::new(
            vec![ds(0, &[(1.0, 2.0), (0.5, -1.0)]), ds(1, &[(1.0, 2.0), (0.5, -1.0)])],
            vec![0.5, 0.5],
            LossModel::ridge(1, 0.1, true),
            None,
        )
        .unwrap();
        let o = vcg_payments_exact(&same).unwrap();
        assert!(o.payments.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn newton_reaches_tolerance_and_is_start_independent() {
        let m = LossModel::softmax(2, 3, 0.05, true);
        let pts: Vec<DataPoint> = (0..60)
            .map(|i| {
                let c = i % 3;
                let t = i as f64 * 0.37;
                DataPoint::new(vec![c as f64 + t.sin() * 0.8, (c as f64 * 1.7).cos() + t.cos() * 0.5], c as f64)
            })
            .collect();
        let s = Scenario::new(
            vec![LocalDataset::new(0, pts[..30].to_vec()), LocalDataset::new(1, pts[30..].to_vec())],
            vec![0.5, 0.5],
            m,
            None,
        )
        .unwrap();
        let w = solve_exact(&s, &s.weights, None, DEFAULT_TOL).unwrap();
        let (_, g) = s.combined_risk_and_grad(&s.weights, &w).unwrap();
        assert!(g.norm() <= DEFAULT_TOL);
        let a = vcg_payments_with(&s, None, DEFAULT_TOL).unwrap();
        let start = vec![0.3; s.dim()];
        let b = vcg_payments_with(&s, Some(&start), DEFAULT_TOL).unwrap();
        for (x, y) in a.payments.iter().zip(&b.payments) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn payment_loss_checks_agent_sets() {
        assert!(matches!(
            payment_loss_against(&[1.0, 2.0], &[1.0]),
            Err(FflError::AgentSetMismatch { run: 2, oracle: 1 })
        ));
        let l = payment_loss_against(&[1.0, 2.0], &[1.5, 2.0]).unwrap();
        assert_eq!(l.max, 0.5);
    }
}
