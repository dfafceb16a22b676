//! Acceptance suite: one check per published property, each returning a
//! claim / measured / bound / verdict row.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::AgentStrategy;
use crate::bounds::{amplified_weights, bound_corollary1, bound_prop2, bound_prop3};
use crate::datagen::{gen_synthetic_ridge, gen_two_agent_regression, SyntheticRidgeSpec, TwoAgentRegressionSpec};
use crate::distribution::{expected_risk, minimize_expected_risk};
use crate::dp::{
    calibrate_noise, partition_clusters, plan_L_theorem3, plan_tradeoff_prop9, run_dpffl, DpConfig, NoiseOverride,
    Prop9Plan,
};
use crate::error::{invalid, Result};
use crate::experiment::{label_skew_default, mean_agent_cost, run_grid, MechanismChoice, Sweep, SweepVariable};
use crate::ffl::{
    payment_error_bound, plan_hyperparams_theorem1, run_fedavg, run_ffl, FflConfig, Theorem1Plan,
};
use crate::mechanism::MechanismRun;
use crate::model::{certify_constants, Scenario, WeightScheme};
use crate::oracle::{certified_gradient_bound, scalable_vcg_exact, solve_exact, vcg_payments_exact, DEFAULT_TOL};
use crate::rng::{child_seed, stream};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: String,
    pub claim: String,
    pub measured: String,
    pub bound: String,
    pub pass: bool,
    pub seconds: f64,
}

impl CriterionOutcome {
    fn new(id: &str, claim: &str, measured: String, bound: String, pass: bool) -> Self {
        Self {
            id: id.into(),
            claim: claim.into(),
            measured,
            bound,
            pass,
            seconds: 0.0,
        }
    }

    fn errored(id: &str, claim: &str, e: &crate::error::FflError) -> Self {
        Self::new(id, claim, format!("error: {e}"), String::new(), false)
    }

    pub fn verdict(&self) -> &'static str {
        if self.pass {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

/// Trial counts. `full` is the published protocol; `quick` is a smoke run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SuiteSize {
    pub ridge_scenarios: usize,
    pub faithfulness_seeds: usize,
    pub bound_trials: usize,
    pub theorem3_scenarios: usize,
    pub dp_seeds: usize,
    pub calibration_tuples: usize,
}

impl SuiteSize {
    pub fn full() -> Self {
        Self {
            ridge_scenarios: 50,
            faithfulness_seeds: 100,
            bound_trials: 100,
            theorem3_scenarios: 5,
            dp_seeds: 200,
            calibration_tuples: 20,
        }
    }

    pub fn quick() -> Self {
        Self {
            ridge_scenarios: 6,
            faithfulness_seeds: 5,
            bound_trials: 5,
            theorem3_scenarios: 1,
            dp_seeds: 10,
            calibration_tuples: 20,
        }
    }
}

const SUITE_SEED: u64 = 20_240_611;

/// Payment rule under test; `SignFlipped` is the deliberate mutation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaymentRule {
    Faithful,
    SignFlipped,
}

fn apply_rule(run: &mut MechanismRun, rule: PaymentRule) {
    if rule == PaymentRule::SignFlipped {
        for p in &mut run.payments {
            *p = -*p;
        }
    }
}

fn random_ridge(index: usize) -> Result<Scenario> {
    let seed = child_seed(SUITE_SEED, "verify/ridge", index as u64);
    let k = stream(seed, "verify/ridge", 0).random_range(2..=10);
    gen_synthetic_ridge(&SyntheticRidgeSpec::new(k, seed))
}

/// Per-scenario result of the exact-payment FFL run used by criteria 1 and 2.
struct RidgeRun {
    payments: Vec<f64>,
    vcg: Vec<f64>,
    bounds: Vec<f64>,
}

fn ffl_ridge_run(index: usize, rule: PaymentRule) -> Result<RidgeRun> {
    let s = random_ridge(index)?;
    let k = s.num_agents();
    let oracle = vcg_payments_exact(&s)?;
    let l_g = s.smoothness();
    let cert = certified_gradient_bound(&s, &oracle, &vec![0.0; s.dim()])?;
    let mut cfg = FflConfig::new(1.0 / l_g, 1.0 / (k as f64 * l_g), 1000, 20, 1e-10, cert.faithful);
    cfg.phase2_cap = 50_000;
    let mut run = run_ffl(&s, &vec![AgentStrategy::Faithful; k], &cfg)?;
    apply_rule(&mut run, rule);
    let bounds = (0..k)
        .map(|j| payment_error_bound(s.weights[j], l_g, cert.faithful, run.phase2[j].iterations, cfg.eta2) + 1e-8)
        .collect();
    Ok(RidgeRun {
        payments: run.payments,
        vcg: oracle.payments,
        bounds,
    })
}

fn ridge_runs(n: usize, rule: PaymentRule) -> Result<Vec<RidgeRun>> {
    (0..n).into_par_iter().map(|i| ffl_ridge_run(i, rule)).collect()
}

const C1: &str = "FFL payments are nonnegative and their sum is nonnegative, exactly";
const C2: &str = "|P_k - P_k^VCG| <= ((1-p_k)/p_k) L_g L_f^2 (T+1) eta2^2 + 1e-8";

fn budget_outcome(runs: &[RidgeRun]) -> CriterionOutcome {
    let min = runs.iter().flat_map(|r| r.payments.iter().copied()).fold(f64::INFINITY, f64::min);
    let min_total = runs.iter().map(|r| r.payments.iter().sum::<f64>()).fold(f64::INFINITY, f64::min);
    let pass = runs.iter().all(|r| r.payments.iter().all(|p| *p >= 0.0) && r.payments.iter().sum::<f64>() >= 0.0);
    CriterionOutcome::new(
        "1",
        C1,
        format!("min P_k = {min:.3e}, min sum = {min_total:.3e} over {} scenarios", runs.len()),
        ">= 0".into(),
        pass,
    )
}

fn accuracy_outcome(runs: &[RidgeRun]) -> CriterionOutcome {
    let mut worst_ratio: f64 = 0.0;
    let mut worst_err: f64 = 0.0;
    let mut pass = true;
    for r in runs {
        for k in 0..r.payments.len() {
            let e = (r.payments[k] - r.vcg[k]).abs();
            pass &= e <= r.bounds[k];
            worst_err = worst_err.max(e);
            worst_ratio = worst_ratio.max(e / r.bounds[k]);
        }
    }
    CriterionOutcome::new(
        "2",
        C2,
        format!("max error {worst_err:.3e}, max error/bound {worst_ratio:.3e}"),
        "ratio <= 1".into(),
        pass,
    )
}

pub fn criterion_1(size: SuiteSize) -> CriterionOutcome {
    match ridge_runs(size.ridge_scenarios, PaymentRule::Faithful) {
        Ok(r) => budget_outcome(&r),
        Err(e) => CriterionOutcome::errored("1", C1, &e),
    }
}

pub fn criterion_2(size: SuiteSize) -> CriterionOutcome {
    match ridge_runs(size.ridge_scenarios, PaymentRule::Faithful) {
        Ok(r) => accuracy_outcome(&r),
        Err(e) => CriterionOutcome::errored("2", C2, &e),
    }
}

/// Criteria 1 and 2 under `rule`; used to show the suite catches a tampered payment.
pub fn payment_checks(size: SuiteSize, rule: PaymentRule) -> Result<(CriterionOutcome, CriterionOutcome)> {
    let runs = ridge_runs(size.ridge_scenarios, rule)?;
    Ok((budget_outcome(&runs), accuracy_outcome(&runs)))
}

pub fn mutation_check(size: SuiteSize) -> CriterionOutcome {
    const CLAIM: &str = "a sign-flipped payment rule fails budget balance or accuracy";
    let small = SuiteSize {
        ridge_scenarios: size.ridge_scenarios.min(5),
        ..size
    };
    match payment_checks(small, PaymentRule::SignFlipped) {
        Ok((a, b)) => CriterionOutcome::new(
            "mutation",
            CLAIM,
            format!("budget balance {}, accuracy {}", a.verdict(), b.verdict()),
            "at least one FAIL".into(),
            !a.pass || !b.pass,
        ),
        Err(e) => CriterionOutcome::errored("mutation", CLAIM, &e),
    }
}

/// Ridge scenario with `mu = 1`, unit feature radius and equal weights.
pub fn theorem1_scenario(k: usize, seed: u64) -> Result<Scenario> {
    let mut spec = SyntheticRidgeSpec::new(k, seed);
    spec.reg = 1.0;
    spec.intercept = false;
    spec.samples = (40, 40);
    spec.weights = WeightScheme::Equal;
    gen_synthetic_ridge(&spec)
}

pub const THEOREM1_EPSILON: f64 = 0.1;
/// Phase I accuracy target of the FFL planner.
pub const THEOREM1_DELTA: f64 = 0.05;

/// Planner output and resulting error for one `K`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem1Run {
    pub k: usize,
    pub plan: Theorem1Plan,
    pub max_error: f64,
}

pub fn theorem1_run(k: usize) -> Result<Theorem1Run> {
    let s = theorem1_scenario(k, child_seed(SUITE_SEED, "verify/theorem1", k as u64))?;
    let oracle = vcg_payments_exact(&s)?;
    let cert = certified_gradient_bound(&s, &oracle, &vec![0.0; s.dim()])?;
    let c = certify_constants(&s, cert.faithful)?;
    let plan = plan_hyperparams_theorem1(&c, k, THEOREM1_EPSILON, THEOREM1_DELTA, cert.g_initial)?;
    let run = run_ffl(&s, &vec![AgentStrategy::Faithful; k], &plan.config)?;
    let max_error = run
        .payments
        .iter()
        .zip(&oracle.payments)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Theorem1Run { k, plan, max_error })
}

pub fn criterion_3() -> CriterionOutcome {
    const CLAIM: &str = "planned FFL has max_k |P_k - P_k^VCG| <= eps = 0.1; T2 non-increasing in K";
    let runs: Result<Vec<Theorem1Run>> = [20, 50, 100].into_par_iter().map(theorem1_run).collect();
    match runs {
        Ok(runs) => {
            let t2: Vec<usize> = runs.iter().map(|r| r.plan.config.t2).collect();
            let errs: Vec<String> = runs.iter().map(|r| format!("{:.3e}", r.max_error)).collect();
            let pass = runs.iter().all(|r| r.max_error <= THEOREM1_EPSILON) && t2.windows(2).all(|w| w[1] <= w[0]);
            CriterionOutcome::new(
                "3",
                CLAIM,
                format!("K=20,50,100: T2 = {t2:?}, max error = [{}]", errs.join(", ")),
                format!("{THEOREM1_EPSILON}"),
                pass,
            )
        }
        Err(e) => CriterionOutcome::errored("3", CLAIM, &e),
    }
}

/// `(L, max error)` of the scalable approximation at tolerance `eps`.
pub fn theorem3_run(index: usize, epsilon: f64) -> Result<(usize, f64)> {
    let seed = child_seed(SUITE_SEED, "verify/theorem3", index as u64);
    let s = theorem1_scenario(30, seed)?;
    let oracle = vcg_payments_exact(&s)?;
    let cert = certified_gradient_bound(&s, &oracle, &vec![0.0; s.dim()])?;
    let c = certify_constants(&s, cert.faithful)?;
    let l = plan_L_theorem3(&c, 30, epsilon)?;
    let partition = partition_clusters(30, l, seed)?;
    let approx = scalable_vcg_exact(&s, &partition)?;
    let err = approx
        .payments
        .iter()
        .zip(&oracle.payments)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((l, err))
}

pub fn criterion_4(size: SuiteSize) -> CriterionOutcome {
    const CLAIM: &str = "scalable VCG with planned L has max_k |P_k^S - P_k^VCG| <= eps";
    let mut lines = Vec::new();
    let mut pass = true;
    for eps in [0.5, 0.1] {
        let res: Result<Vec<(usize, f64)>> =
            (0..size.theorem3_scenarios).into_par_iter().map(|i| theorem3_run(i, eps)).collect();
        match res {
            Ok(r) => {
                let worst = r.iter().map(|x| x.1).fold(0.0, f64::max);
                let ls: Vec<usize> = r.iter().map(|x| x.0).collect();
                pass &= worst <= eps;
                lines.push(format!("eps={eps}: L={ls:?} max error {worst:.3e}"));
            }
            Err(e) => return CriterionOutcome::errored("4", CLAIM, &e),
        }
    }
    CriterionOutcome::new("4", CLAIM, lines.join("; "), "eps".into(), pass)
}

/// Amplification grid `0.25, 0.5, ..., 8`.
pub fn gamma_grid() -> Vec<f64> {
    (1..=32).map(|i| i as f64 * 0.25).collect()
}

/// Agent 0's overall loss (payment plus empirical risk) for every grid `gamma`,
/// under FFL and under payment-free federated averaging.
pub fn two_agent_overall_losses(mean: f64, seed: u64, gammas: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = gen_two_agent_regression(&TwoAgentRegressionSpec::new(50, 400, mean, seed))?;
    let l_g = s.smoothness();
    let mut cfg = FflConfig::new(0.5 / l_g, 0.5 / l_g, 1500, 50, 1e-10, f64::INFINITY);
    cfg.phase2_cap = 50_000;
    let mut ffl = Vec::with_capacity(gammas.len());
    let mut fedavg = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let st = vec![AgentStrategy::Amplify { gamma: g }, AgentStrategy::Faithful];
        let r = run_ffl(&s, &st, &cfg)?;
        ffl.push(r.payments[0] + s.local_risk(0, &r.w_star)?);
        let r = run_fedavg(&s, &st, &cfg)?;
        fedavg.push(s.local_risk(0, &r.w_star)?);
    }
    Ok((ffl, fedavg))
}

fn argmin(grid: &[f64], v: &[f64]) -> f64 {
    let i = (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap_or(0);
    grid[i]
}

pub fn criterion_5(size: SuiteSize) -> CriterionOutcome {
    const CLAIM: &str = "mean=2: FFL-optimal gamma in [0.5, 2], FedAvg-optimal gamma >= 4, in >= 95% of seeds";
    let grid = gamma_grid();
    let res: Result<Vec<(f64, f64)>> = (0..size.faithfulness_seeds)
        .into_par_iter()
        .map(|i| {
            let (f, a) = two_agent_overall_losses(2.0, child_seed(SUITE_SEED, "verify/faithful", i as u64), &grid)?;
            Ok((argmin(&grid, &f), argmin(&grid, &a)))
        })
        .collect();
    match res {
        Ok(r) => {
            let ok = r.iter().filter(|(f, a)| (0.5..=2.0).contains(f) && *a >= 4.0).count();
            let frac = ok as f64 / r.len() as f64;
            CriterionOutcome::new(
                "5",
                CLAIM,
                format!("{ok}/{} seeds ({:.1}%)", r.len(), 100.0 * frac),
                ">= 95%".into(),
                frac >= 0.95,
            )
        }
        Err(e) => CriterionOutcome::errored("5", CLAIM, &e),
    }
}

pub fn criterion_6() -> CriterionOutcome {
    const CLAIM: &str = "bound_prop3(1) = bound_prop2 to 1e-12; bound_prop3(1e6) within 1e-3 of the local bound";
    let run = || -> Result<(f64, f64)> {
        let s = gen_two_agent_regression(&TwoAgentRegressionSpec::new(50, 400, 0.1, SUITE_SEED))?;
        let c = certify_constants(&s, 1.0)?;
        let a = (bound_prop3(&c, &s, 0, 1.0, 0.01)? - bound_prop2(&c, &s, 0, 0.01)?).abs();
        let b = (bound_prop3(&c, &s, 0, 1e6, 0.01)? - bound_corollary1(&c, 50, s.dim(), 0.01)?).abs();
        Ok((a, b))
    };
    match run() {
        Ok((a, b)) => CriterionOutcome::new(
            "6",
            CLAIM,
            format!("gaps {a:.3e}, {b:.3e}"),
            "1e-12, 1e-3".into(),
            a <= 1e-12 && b <= 1e-3,
        ),
        Err(e) => CriterionOutcome::errored("6", CLAIM, &e),
    }
}

/// Whether agent 0's excess expected risk stays below the amplified-report
/// bound at every grid `gamma`; returns the largest excess/bound ratio.
pub fn bound_validity_trial(seed: u64, gammas: &[f64], delta: f64) -> Result<f64> {
    let spec = TwoAgentRegressionSpec::new(50, 400, 0.1, seed);
    let s = gen_two_agent_regression(&spec)?;
    let dists = spec.distributions()?;
    let c = certify_constants(&s, 1.0)?;
    let best = minimize_expected_risk(&s.loss, &[(1.0, &dists[0])])?.1;
    let mut worst: f64 = 0.0;
    for &g in gammas {
        let w = solve_exact(&s, &amplified_weights(&s.weights, 0, g), None, DEFAULT_TOL)?;
        let excess = expected_risk(&s.loss, &dists[0], &w)? - best;
        worst = worst.max(excess / bound_prop3(&c, &s, 0, g, delta)?);
    }
    Ok(worst)
}

pub fn criterion_7(size: SuiteSize) -> CriterionOutcome {
    const CLAIM: &str = "agent 1 excess expected risk <= bound_prop3(gamma) on the whole grid, >= 99% of trials";
    let grid = gamma_grid();
    let res: Result<Vec<f64>> = (0..size.bound_trials)
        .into_par_iter()
        .map(|i| bound_validity_trial(child_seed(SUITE_SEED, "verify/bound", i as u64), &grid, 0.01))
        .collect();
    match res {
        Ok(r) => {
            let ok = r.iter().filter(|x| **x <= 1.0).count();
            let worst = r.iter().copied().fold(0.0, f64::max);
            let frac = ok as f64 / r.len() as f64;
            CriterionOutcome::new(
                "7",
                CLAIM,
                format!("{ok}/{} trials, max excess/bound {worst:.3e}", r.len()),
                ">= 99%".into(),
                frac >= 0.99,
            )
        }
        Err(e) => CriterionOutcome::errored("7", CLAIM, &e),
    }
}

/// `(L_f, K, n, T1, T2, alpha, beta)`; the first tuple is the worked example.
pub type CalibrationTuple = (f64, usize, usize, usize, usize, f64, f64);

pub fn calibration_tuples(n: usize) -> Vec<CalibrationTuple> {
    let mut rng = stream(SUITE_SEED, "verify/calibration", 0);
    let mut v = vec![(1.0, 10, 100, 80, 20, 0.1, 0.01)];
    while v.len() < n {
        v.push((
            rng.random_range(0.1..10.0),
            rng.random_range(2..=200),
            rng.random_range(10..=10_000),
            rng.random_range(0..=500),
            rng.random_range(1..=100),
            rng.random_range(0.01..5.0),
            rng.random_range(1e-6..0.5),
        ));
    }
    v
}

pub fn criterion_8(size: SuiteSize) -> CriterionOutcome {
    const CLAIM: &str = "sigma^2 and sigma_P^2 match a direct evaluation to 1e-12; zCDP budget adds up to 1e-9";
    let mut worst_formula: f64 = 0.0;
    let mut worst_budget: f64 = 0.0;
    let mut worked = f64::NAN;
    for (i, &(l_f, k, n, t1, t2, alpha, beta)) in calibration_tuples(size.calibration_tuples).iter().enumerate() {
        let cal = match calibrate_noise(l_f, k, n, t1, t2, alpha, beta) {
            Ok(c) => c,
            Err(e) => return CriterionOutcome::errored("8", CLAIM, &e),
        };
        if i == 0 {
            worked = cal.sigma_sq;
        }
        let lb = -beta.ln();
        let releases = t1 as f64 + (k * t2) as f64;
        let direct = 16.0 * releases * lb * (l_f / (k as f64 * n as f64 * alpha)).powi(2);
        let direct_p = 16.0 * k as f64 * lb / (n as f64 * alpha).powi(2);
        worst_formula = worst_formula
            .max((cal.sigma_sq - direct).abs() / direct)
            .max((cal.sigma_p_sq - direct_p).abs() / direct_p);
        let target = alpha * alpha / (4.0 * lb);
        let total = cal.gradient_releases as f64 * cal.rho_gradient_step + cal.payment_releases as f64 * cal.rho_payment;
        worst_budget = worst_budget.max((total - target).abs() / target);
    }
    let worked_ok = (worked - 2.0631).abs() < 5e-5;
    CriterionOutcome::new(
        "8",
        CLAIM,
        format!("worked sigma^2 = {worked:.6}, max rel formula gap {worst_formula:.2e}, max rel budget gap {worst_budget:.2e}"),
        "2.0631, 1e-12, 1e-9".into(),
        worked_ok && worst_formula <= 1e-12 && worst_budget <= 1e-9,
    )
}

/// Settings of the DP Monte Carlo check.
pub const PROP9_K: usize = 10;
pub const PROP9_ALPHA: f64 = 2.0;
pub const PROP9_BETA: f64 = 0.01;
pub const PROP9_EPSILON: f64 = 0.1;

pub fn prop9_scenario() -> Result<Scenario> {
    let mut spec = SyntheticRidgeSpec::new(PROP9_K, child_seed(SUITE_SEED, "verify/prop9", 0));
    spec.samples = (300, 300);
    gen_synthetic_ridge(&spec)
}

/// Planner output for `alpha` on the Monte Carlo scenario, with `eta2 = 1/((K-1) L_g)`.
pub fn prop9_plan(s: &Scenario, l_f: f64, alpha: f64) -> Result<Prop9Plan> {
    let c = certify_constants(s, l_f)?;
    let eta2 = 1.0 / ((PROP9_K - 1) as f64 * c.l_g);
    plan_tradeoff_prop9(&c, PROP9_K, s.n_min(), s.dim(), alpha, PROP9_BETA, eta2, PROP9_EPSILON)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop9MonteCarlo {
    pub plan: Prop9Plan,
    pub num_clusters: usize,
    /// Mean over seeds of `|P_k - P_k^VCG|`, per agent.
    pub mean_abs_error: Vec<f64>,
    /// `|mean_seeds P_k - P_k^VCG|`, per agent.
    pub bias: Vec<f64>,
    pub clipped_runs: usize,
}

pub fn prop9_monte_carlo(seeds: usize) -> Result<Prop9MonteCarlo> {
    let s = prop9_scenario()?;
    let oracle = vcg_payments_exact(&s)?;
    let cert = certified_gradient_bound(&s, &oracle, &vec![0.0; s.dim()])?;
    let l_f = cert.faithful;
    let plan = prop9_plan(&s, l_f, PROP9_ALPHA)?;
    let c = certify_constants(&s, l_f)?;
    let l = plan_L_theorem3(&c, PROP9_K, PROP9_EPSILON)?;
    let runs: Vec<(Vec<f64>, bool)> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let mut cfg = DpConfig::new(
                PROP9_ALPHA,
                PROP9_BETA,
                l,
                1.0 / c.l_g,
                1.0 / ((PROP9_K - 1) as f64 * c.l_g),
                plan.t,
                plan.t,
                PROP9_EPSILON,
                child_seed(SUITE_SEED, "verify/prop9", i as u64 + 1),
                l_f,
            );
            cfg.gradient_bound.clip = true;
            let r = run_dpffl(&s, &vec![AgentStrategy::Faithful; PROP9_K], &cfg)?;
            Ok((r.payments, r.clipped))
        })
        .collect::<Result<_>>()?;
    let n = runs.len() as f64;
    let mut mean_abs_error = vec![0.0; PROP9_K];
    let mut mean = [0.0; PROP9_K];
    for (p, _) in &runs {
        for k in 0..PROP9_K {
            mean_abs_error[k] += (p[k] - oracle.payments[k]).abs() / n;
            mean[k] += p[k] / n;
        }
    }
    let bias = mean.iter().zip(&oracle.payments).map(|(m, v)| (m - v).abs()).collect();
    Ok(Prop9MonteCarlo {
        plan,
        num_clusters: l,
        mean_abs_error,
        bias,
        clipped_runs: runs.iter().filter(|r| r.1).count(),
    })
}

pub fn criterion_9_monte_carlo(size: SuiteSize) -> CriterionOutcome {
    const CLAIM: &str = "DP-FFL mean |P_k - P_k^VCG| over seeds <= DP payment error bound for every agent";
    match prop9_monte_carlo(size.dp_seeds) {
        Ok(mc) => {
            let worst = mc.mean_abs_error.iter().copied().fold(0.0, f64::max);
            let bias = mc.bias.iter().copied().fold(0.0, f64::max);
            CriterionOutcome::new(
                "9a",
                CLAIM,
                format!(
                    "T1=T2={}, L={}, max mean error {worst:.3e}, max |mean P - VCG| {bias:.3e}, clipped runs {}",
                    mc.plan.t, mc.num_clusters, mc.clipped_runs
                ),
                format!("{:.3e}", mc.plan.bound),
                worst <= mc.plan.bound,
            )
        }
        Err(e) => CriterionOutcome::errored("9a", CLAIM, &e),
    }
}

pub const PROP9_ALPHA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Planner outputs along [`PROP9_ALPHA_GRID`].
pub fn prop9_alpha_sweep() -> Result<Vec<(f64, Prop9Plan)>> {
    let s = prop9_scenario()?;
    let oracle = vcg_payments_exact(&s)?;
    let l_f = certified_gradient_bound(&s, &oracle, &vec![0.0; s.dim()])?.faithful;
    PROP9_ALPHA_GRID.iter().map(|&a| Ok((a, prop9_plan(&s, l_f, a)?))).collect()
}

fn sweep_summary(sweep: &[(f64, Prop9Plan)]) -> String {
    sweep
        .iter()
        .map(|(a, p)| format!("alpha={a}: T={} bound={:.3e}", p.t, p.bound))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn criterion_9_bound_direction() -> CriterionOutcome {
    const CLAIM: &str = "DP payment error bound increases as alpha decreases (fixed eta2)";
    match prop9_alpha_sweep() {
        Ok(sw) => {
            let pass = sw.windows(2).all(|w| w[0].1.bound > w[1].1.bound);
            CriterionOutcome::new("9b", CLAIM, sweep_summary(&sw), "strictly decreasing in alpha".into(), pass)
        }
        Err(e) => CriterionOutcome::errored("9b", CLAIM, &e),
    }
}

pub fn criterion_9_iteration_direction() -> CriterionOutcome {
    const CLAIM: &str = "T1 = T2 decreases as alpha increases (fixed eta2)";
    match prop9_alpha_sweep() {
        Ok(sw) => {
            let pass = sw.windows(2).all(|w| w[1].1.t < w[0].1.t);
            CriterionOutcome::new("9c", CLAIM, sweep_summary(&sw), "strictly decreasing in alpha".into(), pass)
        }
        Err(e) => CriterionOutcome::errored("9c", CLAIM, &e),
    }
}

pub const LABEL_SKEW_DELTAS: [f64; 6] = [0.05, 0.15, 0.3, 0.5, 0.7, 0.9];

pub fn criterion_10() -> CriterionOutcome {
    const CLAIM: &str = "label skew: FFL loss < manipulated FedAvg, within 1% of optimum; local-vs-federated crossover exists";
    let run = || -> Result<(bool, String)> {
        let mut cfg = label_skew_default(0.05, SUITE_SEED);
        cfg.mechanisms = vec![MechanismChoice::Ffl, MechanismChoice::FedavgManipulated, MechanismChoice::Local];
        let base = run_grid(&cfg)?;
        if let Some(e) = base.errors.first() {
            return Err(invalid(format!("grid point failed: {}", e.message)));
        }
        let agg = |m: &str| {
            base.rows
                .iter()
                .find(|r| r.mechanism == m && r.agent.is_none())
                .and_then(|r| r.global_loss.or(r.oracle_global_loss))
                .ok_or_else(|| invalid(format!("no aggregate row for {m}")))
        };
        let (ffl, manip, opt) = (agg("ffl")?, agg("fedavg_manipulated")?, agg("oracle")?);
        cfg.mechanisms = vec![MechanismChoice::Ffl, MechanismChoice::Local];
        cfg.sweep = Some(Sweep {
            variable: SweepVariable::Delta,
            agent: 0,
            values: LABEL_SKEW_DELTAS.to_vec(),
        });
        let sweep = run_grid(&cfg)?;
        if let Some(e) = sweep.errors.first() {
            return Err(invalid(format!("sweep point failed: {}", e.message)));
        }
        let costs: Vec<String> = (0..LABEL_SKEW_DELTAS.len())
            .map(|g| {
                format!(
                    "{}: local {:.4} ffl {:.4}",
                    LABEL_SKEW_DELTAS[g],
                    mean_agent_cost(&sweep.rows, g, "local").unwrap_or(f64::NAN),
                    mean_agent_cost(&sweep.rows, g, "ffl").unwrap_or(f64::NAN)
                )
            })
            .collect();
        let ok = ffl < manip && ffl <= 1.01 * opt && sweep.crossover.is_some_and(|d| d > LABEL_SKEW_DELTAS[0]);
        Ok((
            ok,
            format!(
                "ffl {ffl:.5}, manipulated {manip:.5}, optimum {opt:.5}, crossover {:?} [{}]",
                sweep.crossover,
                costs.join("; ")
            ),
        ))
    };
    match run() {
        Ok((ok, measured)) => {
            CriterionOutcome::new("10", CLAIM, measured, "ffl < manipulated, <= 1.01 optimum".into(), ok)
        }
        Err(e) => CriterionOutcome::errored("10", CLAIM, &e),
    }
}

pub fn criterion_11() -> CriterionOutcome {
    const CLAIM: &str = "noise-free DP-FFL with L = K reproduces leave-one-out payments to 1e-6";
    let run = || -> Result<f64> {
        let s = gen_synthetic_ridge(&SyntheticRidgeSpec::new(5, child_seed(SUITE_SEED, "verify/degenerate", 0)))?;
        let k = s.num_agents();
        let oracle = vcg_payments_exact(&s)?;
        let l_f = certified_gradient_bound(&s, &oracle, &vec![0.0; s.dim()])?.faithful;
        let l_g = s.smoothness();
        let mut cfg = DpConfig::new(1.0, 0.01, k, 1.0 / l_g, 1.0 / ((k - 1) as f64 * l_g), 3000, 3000, 0.1, 1, l_f);
        cfg.noise_override = Some(NoiseOverride {
            sigma_sq: 0.0,
            sigma_p_sq: 0.0,
        });
        let r = run_dpffl(&s, &vec![AgentStrategy::Faithful; k], &cfg)?;
        Ok(r.payments
            .iter()
            .zip(&oracle.payments)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    };
    match run() {
        Ok(e) => CriterionOutcome::new("11", CLAIM, format!("max gap {e:.3e}"), "1e-6".into(), e <= 1e-6),
        Err(e) => CriterionOutcome::errored("11", CLAIM, &e),
    }
}

/// Planner outputs printed with the suite.
pub fn planner_report() -> Vec<String> {
    let mut out = Vec::new();
    for k in [20, 50, 100] {
        match theorem1_run(k) {
            Ok(r) => out.push(format!(
                "theorem 1, K={k}: eta1={:.4} eta2={:.4e} T1={} T2={} (interval [{:.3}, {:.3}])",
                r.plan.config.eta1, r.plan.config.eta2, r.plan.config.t1, r.plan.config.t2, r.plan.t2_lower, r.plan.t2_upper
            )),
            Err(e) => out.push(format!("theorem 1, K={k}: {e}")),
        }
    }
    for eps in [0.5, 0.1] {
        match theorem3_run(0, eps) {
            Ok((l, _)) => out.push(format!("theorem 3, K=30, eps={eps}: L={l}")),
            Err(e) => out.push(format!("theorem 3, K=30, eps={eps}: {e}")),
        }
    }
    match prop9_alpha_sweep() {
        Ok(sw) => out.push(format!("prop 9, K={PROP9_K}: {}", sweep_summary(&sw))),
        Err(e) => out.push(format!("prop 9: {e}")),
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub outcomes: Vec<CriterionOutcome>,
    pub planners: Vec<String>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            let _ = writeln!(
                s,
                "{} criterion {}: {} | measured: {} | bound: {} | {:.1}s",
                o.verdict(),
                o.id,
                o.claim,
                o.measured,
                o.bound,
                o.seconds
            );
        }
        for p in &self.planners {
            let _ = writeln!(s, "plan: {p}");
        }
        s
    }
}

fn timed(f: impl FnOnce() -> CriterionOutcome) -> CriterionOutcome {
    let start = Instant::now();
    let mut o = f();
    o.seconds = start.elapsed().as_secs_f64();
    o
}

pub fn verify_suite(size: SuiteSize) -> SuiteReport {
    let outcomes = vec![
        timed(|| criterion_1(size)),
        timed(|| criterion_2(size)),
        timed(criterion_3),
        timed(|| criterion_4(size)),
        timed(|| criterion_5(size)),
        timed(criterion_6),
        timed(|| criterion_7(size)),
        timed(|| criterion_8(size)),
        timed(|| criterion_9_monte_carlo(size)),
        timed(criterion_9_bound_direction),
        timed(criterion_9_iteration_direction),
        timed(criterion_10),
        timed(criterion_11),
        timed(|| mutation_check(size)),
    ];
    SuiteReport {
        outcomes,
        planners: planner_report(),
    }
}
