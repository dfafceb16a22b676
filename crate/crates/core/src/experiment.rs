//! Configuration-driven experiment grids.
//!
//! A grid point is one sweep value; each point runs `repetitions` times.
//! The scenario seed depends on the repetition only, so every sweep value
//! sees the same data; mechanism noise is keyed by (grid index, repetition).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{apply_opt_out, local_learning, AgentStrategy};
use crate::bounds::bound_prop3;
use crate::datagen::{
    gen_gaussian_mixture, gen_label_skew_split, gen_synthetic_ridge, gen_two_agent_regression, load_idx_dataset,
    ClassificationData, GaussianMixtureSpec, LabelSkewSpec, SyntheticRidgeSpec, TwoAgentRegressionSpec,
};
use crate::distribution::{expected_risk, minimize_expected_risk};
use crate::dp::{run_dpffl, DpConfig};
use crate::error::{invalid, Result};
use crate::ffl::{default_phase2_cap, run_fedavg, run_ffl, FflConfig, GradientBound};
use crate::model::{certify_constants, local_empirical_risk, LocalDataset, ModelVector, Scenario, WeightScheme};
use crate::oracle::{accuracy, certified_gradient_bound, solve_exact, vcg_payments_exact, DEFAULT_TOL};
use crate::rng::child_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    GaussianMixture(GaussianMixtureSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    TwoAgent(TwoAgentRegressionSpec),
    LabelSkew {
        #[serde(flatten)]
        spec: LabelSkewSpec,
        source: DataSource,
    },
    SyntheticRidge(SyntheticRidgeSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismChoice {
    Ffl,
    Dpffl,
    Local,
    FedavgManipulated,
}

impl MechanismChoice {
    pub fn name(self) -> &'static str {
        match self {
            MechanismChoice::Ffl => "ffl",
            MechanismChoice::Dpffl => "dpffl",
            MechanismChoice::Local => "local",
            MechanismChoice::FedavgManipulated => "fedavg_manipulated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Gamma,
    N,
    Delta,
    Alpha,
    L,
    Eta2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub variable: SweepVariable,
    /// Agent targeted by `gamma` and `n` sweeps.
    #[serde(default)]
    pub agent: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manipulation {
    pub agent: usize,
    pub gamma: f64,
}

impl Default for Manipulation {
    fn default() -> Self {
        Self { agent: 0, gamma: 3.0 }
    }
}

/// Step sizes default to `1/L_g` and `1/(K L_g)`; `l_f` defaults to the
/// oracle's strategic gradient certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FflParams {
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub t1: usize,
    pub t2: usize,
    pub epsilon: f64,
    pub phase2_cap: Option<usize>,
    pub l_f: Option<f64>,
    #[serde(default)]
    pub clip: bool,
}

impl Default for FflParams {
    fn default() -> Self {
        Self {
            eta1: None,
            eta2: None,
            t1: 200,
            t2: 20,
            epsilon: 0.1,
            phase2_cap: None,
            l_f: None,
            clip: false,
        }
    }
}

/// `num_clusters` defaults to `K`; step sizes to `1/L_g` and `1/((K-1) L_g)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpParams {
    pub alpha: f64,
    pub beta: f64,
    pub num_clusters: Option<usize>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub t1: usize,
    pub t2: usize,
    pub epsilon: f64,
    pub l_f: Option<f64>,
    #[serde(default)]
    pub clip: bool,
}

impl Default for DpParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            num_clusters: None,
            eta1: None,
            eta2: None,
            t1: 80,
            t2: 20,
            epsilon: 0.1,
            l_f: None,
            clip: false,
        }
    }
}

fn default_repetitions() -> usize {
    1
}

fn default_bound_delta() -> f64 {
    0.01
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub mechanisms: Vec<MechanismChoice>,
    /// Non-faithful strategies by agent index.
    #[serde(default)]
    pub strategies: BTreeMap<usize, AgentStrategy>,
    #[serde(default)]
    pub manipulation: Manipulation,
    #[serde(default)]
    pub ffl: FflParams,
    #[serde(default)]
    pub dp: DpParams,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Confidence parameter of the reported risk bounds.
    #[serde(default = "default_bound_delta")]
    pub bound_delta: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty() {
            return Err(invalid("no mechanisms selected"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(invalid("sweep grid is empty"));
            }
            let applicable = match (s.variable, &self.scenario) {
                (SweepVariable::Delta, ScenarioConfig::LabelSkew { .. }) => true,
                (SweepVariable::Delta, _) => false,
                _ => true,
            };
            if !applicable {
                return Err(invalid("delta sweeps need a label-skew scenario"));
            }
        }
        for s in self.strategies.values() {
            s.validate()?;
        }
        if !(self.bound_delta > 0.0 && self.bound_delta < 1.0) {
            return Err(invalid("bound_delta must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn grid(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|v| Some(*v)).collect(),
            None => vec![None],
        }
    }
}

/// A generated scenario with optional per-agent evaluation sets.
struct Built {
    scenario: Scenario,
    tests: Option<Vec<LocalDataset>>,
}

fn usize_value(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(invalid(format!("{what} must be a positive integer, got {v}")))
    }
}

fn build_scenario(cfg: &ExperimentConfig, value: Option<f64>, seed: u64) -> Result<Built> {
    let sweep = cfg.sweep.as_ref().map(|s| (s.variable, s.agent));
    match &cfg.scenario {
        ScenarioConfig::TwoAgent(spec) => {
            let mut spec = spec.clone();
            spec.seed = seed;
            if let (Some((SweepVariable::N, agent)), Some(v)) = (sweep, value) {
                let n = usize_value(v, "n")?;
                if agent == 0 {
                    spec.n1 = n;
                } else {
                    spec.n2 = n;
                }
            }
            Ok(Built {
                scenario: gen_two_agent_regression(&spec)?,
                tests: None,
            })
        }
        ScenarioConfig::SyntheticRidge(spec) => {
            let mut spec = spec.clone();
            spec.seed = seed;
            if let (Some((SweepVariable::N, _)), Some(v)) = (sweep, value) {
                let n = usize_value(v, "n")?;
                spec.samples = (n, n);
            }
            Ok(Built {
                scenario: gen_synthetic_ridge(&spec)?,
                tests: None,
            })
        }
        ScenarioConfig::LabelSkew { spec, source } => {
            let mut spec = spec.clone();
            spec.seed = seed;
            let (train, test) = load_source(source, seed, sweep, value)?;
            if let (Some((SweepVariable::Delta, _)), Some(v)) = (sweep, value) {
                spec.delta = v;
            }
            let (scenario, tests) = gen_label_skew_split(&spec, &train, &test)?;
            Ok(Built {
                scenario,
                tests: Some(tests),
            })
        }
    }
}

fn load_source(
    source: &DataSource,
    seed: u64,
    sweep: Option<(SweepVariable, usize)>,
    value: Option<f64>,
) -> Result<(ClassificationData, ClassificationData)> {
    match source {
        DataSource::GaussianMixture(spec) => {
            let mut spec = spec.clone();
            spec.seed = seed;
            if let (Some((SweepVariable::N, _)), Some(v)) = (sweep, value) {
                spec.train_samples = usize_value(v, "n")?;
            }
            gen_gaussian_mixture(&spec)
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let mut train = load_idx_dataset(train_images, train_labels)?;
            let test = load_idx_dataset(test_images, test_labels)?;
            if let (Some((SweepVariable::N, _)), Some(v)) = (sweep, value) {
                train.points.truncate(usize_value(v, "n")?);
            }
            Ok((train, test))
        }
    }
}

/// One CSV row; `agent` is `None` for the aggregate row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub grid_index: usize,
    pub sweep_value: Option<f64>,
    pub repetition: usize,
    pub seed: u64,
    pub mechanism: String,
    pub agent: Option<usize>,
    pub payment: Option<f64>,
    pub empirical_risk: Option<f64>,
    pub overall_loss: Option<f64>,
    pub test_risk: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub excess_expected_risk: Option<f64>,
    pub risk_bound: Option<f64>,
    pub vcg_payment: Option<f64>,
    pub payment_error: Option<f64>,
    pub global_loss: Option<f64>,
    pub weighted_accuracy: Option<f64>,
    pub oracle_global_loss: Option<f64>,
    pub clipped: Option<bool>,
}

impl ResultRow {
    fn new(grid_index: usize, sweep_value: Option<f64>, repetition: usize, seed: u64, mechanism: &str) -> Self {
        Self {
            grid_index,
            sweep_value,
            repetition,
            seed,
            mechanism: mechanism.into(),
            agent: None,
            payment: None,
            empirical_risk: None,
            overall_loss: None,
            test_risk: None,
            test_accuracy: None,
            excess_expected_risk: None,
            risk_bound: None,
            vcg_payment: None,
            payment_error: None,
            global_loss: None,
            weighted_accuracy: None,
            oracle_global_loss: None,
            clipped: None,
        }
    }

    fn sort_key(&self) -> (usize, usize, String, usize) {
        (self.grid_index, self.repetition, self.mechanism.clone(), self.agent.map_or(usize::MAX, |a| a))
    }
}

/// Failure of one (grid point, repetition, mechanism).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointError {
    pub grid_index: usize,
    pub sweep_value: Option<f64>,
    pub repetition: usize,
    pub mechanism: Option<String>,
    pub message: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub errors: Vec<PointError>,
    /// First sweep value at which local learning's mean per-agent overall cost
    /// beats federated participation (delta sweeps only).
    pub crossover: Option<f64>,
}

fn strategies_for(cfg: &ExperimentConfig, k_total: usize, value: Option<f64>) -> Result<Vec<AgentStrategy>> {
    let mut st = vec![AgentStrategy::Faithful; k_total];
    for (&a, s) in &cfg.strategies {
        if a >= k_total {
            return Err(invalid(format!("strategy for agent {a} but only {k_total} agents")));
        }
        st[a] = s.clone();
    }
    if let (Some(s), Some(v)) = (&cfg.sweep, value) {
        if s.variable == SweepVariable::Gamma {
            if s.agent >= k_total {
                return Err(invalid(format!("sweep agent {} out of range", s.agent)));
            }
            st[s.agent] = AgentStrategy::Amplify { gamma: v };
        }
    }
    Ok(st)
}

fn amplification(s: &AgentStrategy) -> f64 {
    match s {
        AgentStrategy::Amplify { gamma } => *gamma,
        _ => 1.0,
    }
}

/// Shared per-(grid, repetition) context.
struct PointCtx<'a> {
    cfg: &'a ExperimentConfig,
    built: Built,
    grid_index: usize,
    value: Option<f64>,
    repetition: usize,
    seed: u64,
}

impl PointCtx<'_> {
    fn scenario(&self) -> &Scenario {
        &self.built.scenario
    }

    fn eval_sets(&self) -> Option<&[LocalDataset]> {
        self.built.tests.as_deref()
    }

    fn row(&self, mechanism: &str) -> ResultRow {
        ResultRow::new(self.grid_index, self.value, self.repetition, self.seed, mechanism)
    }

    /// Per-agent rows for per-agent models `models[k]` and payments.
    fn agent_rows(
        &self,
        mechanism: &str,
        models: &[&[f64]],
        payments: &[f64],
        strategies: &[AgentStrategy],
        vcg: Option<&[f64]>,
    ) -> Result<Vec<ResultRow>> {
        let s = self.scenario();
        let mut rows = Vec::with_capacity(s.num_agents());
        let c = if s.known_distributions.is_some() {
            Some(certify_constants(s, 1.0)?)
        } else {
            None
        };
        for k in 0..s.num_agents() {
            let w = models[k];
            let mut r = self.row(mechanism);
            r.agent = Some(k);
            r.payment = Some(payments[k]);
            let risk = s.local_risk(k, w)?;
            r.empirical_risk = Some(risk);
            r.overall_loss = Some(payments[k] + risk);
            if let Some(tests) = self.eval_sets() {
                r.test_risk = Some(local_empirical_risk(&s.loss, &tests[k], w)?);
                if s.loss.is_classification() {
                    r.test_accuracy = Some(accuracy(s, &tests[k], w));
                }
            }
            if let (Some(dists), Some(c)) = (&s.known_distributions, &c) {
                let e = expected_risk(&s.loss, &dists[k], w)?;
                let best = minimize_expected_risk(&s.loss, &[(1.0, &dists[k])])?.1;
                r.excess_expected_risk = Some(e - best);
                r.test_risk = Some(e);
                let gamma = amplification(&strategies[k]);
                if mechanism != "local" {
                    r.risk_bound = Some(bound_prop3(c, s, k, gamma, self.cfg.bound_delta)?);
                }
            }
            if let Some(v) = vcg {
                r.vcg_payment = Some(v[k]);
                r.payment_error = Some((payments[k] - v[k]).abs());
            }
            rows.push(r);
        }
        Ok(rows)
    }
}

fn resolve_l_f(explicit: Option<f64>, s: &Scenario, w0: &[f64]) -> Result<f64> {
    match explicit {
        Some(v) => Ok(v),
        None => {
            let oracle = vcg_payments_exact(s)?;
            Ok(certified_gradient_bound(s, &oracle, w0)?.strategic)
        }
    }
}

fn ffl_config(cfg: &ExperimentConfig, s: &Scenario, value: Option<f64>) -> Result<FflConfig> {
    let p = &cfg.ffl;
    let l_g = s.smoothness();
    let k = s.num_agents() as f64;
    let mut eta2 = p.eta2.unwrap_or(1.0 / (k * l_g));
    if let (Some(sw), Some(v)) = (&cfg.sweep, value) {
        if sw.variable == SweepVariable::Eta2 {
            eta2 = v;
        }
    }
    let l_f = resolve_l_f(p.l_f, s, &vec![0.0; s.dim()])?;
    Ok(FflConfig {
        eta1: p.eta1.unwrap_or(1.0 / l_g),
        eta2,
        t1: p.t1,
        t2: p.t2,
        epsilon: p.epsilon,
        phase2_cap: p.phase2_cap.unwrap_or_else(|| default_phase2_cap(p.t2)),
        w0: None,
        gradient_bound: GradientBound { l_f, clip: p.clip },
        record_iterates: false,
    })
}

fn dp_config(cfg: &ExperimentConfig, s: &Scenario, value: Option<f64>, seed: u64) -> Result<DpConfig> {
    let p = &cfg.dp;
    let l_g = s.smoothness();
    let k = s.num_agents();
    let mut dc = DpConfig::new(
        p.alpha,
        p.beta,
        p.num_clusters.unwrap_or(k),
        p.eta1.unwrap_or(1.0 / l_g),
        p.eta2.unwrap_or(1.0 / ((k.max(2) - 1) as f64 * l_g)),
        p.t1,
        p.t2,
        p.epsilon,
        seed,
        resolve_l_f(p.l_f, s, &vec![0.0; s.dim()])?,
    );
    dc.gradient_bound.clip = p.clip;
    if let (Some(sw), Some(v)) = (&cfg.sweep, value) {
        match sw.variable {
            SweepVariable::Alpha => dc.alpha = v,
            SweepVariable::L => dc.num_clusters = usize_value(v, "L")?,
            SweepVariable::Eta2 => dc.eta2 = v,
            _ => {}
        }
    }
    Ok(dc)
}

fn run_mechanism(ctx: &PointCtx<'_>, m: MechanismChoice, vcg: Option<&[f64]>) -> Result<Vec<ResultRow>> {
    let cfg = ctx.cfg;
    let s = ctx.scenario();
    let k_total = s.num_agents();
    let strategies = strategies_for(cfg, k_total, ctx.value)?;
    let mech_seed = child_seed(ctx.seed, "experiment", m as u64);
    let (models, payments, clipped): (Vec<ModelVector>, Vec<f64>, bool) = match m {
        MechanismChoice::Local => {
            let models = s
                .datasets
                .iter()
                .map(|ds| local_learning(ds, &s.loss, 1e-8))
                .collect::<Result<Vec<_>>>()?;
            (models, vec![0.0; k_total], false)
        }
        MechanismChoice::FedavgManipulated => {
            let mut st = strategies.clone();
            let man = cfg.manipulation;
            if man.agent >= k_total {
                return Err(invalid(format!("manipulating agent {} out of range", man.agent)));
            }
            let swept_gamma = cfg.sweep.as_ref().is_some_and(|sw| sw.variable == SweepVariable::Gamma);
            if !swept_gamma {
                st[man.agent] = AgentStrategy::Amplify { gamma: man.gamma };
            }
            let fc = ffl_config(cfg, s, ctx.value)?;
            let run = run_fedavg(s, &st, &fc)?;
            let mut rows = ctx.agent_rows(m.name(), &vec![&run.w_star[..]; k_total], &run.payments, &st, None)?;
            let mut agg = ctx.row(m.name());
            agg.global_loss = Some(s.global_risk(&run.w_star)?);
            agg.clipped = Some(run.clipped);
            agg.weighted_accuracy = weighted_accuracy(ctx, &vec![&run.w_star[..]; k_total]);
            rows.push(agg);
            return Ok(rows);
        }
        MechanismChoice::Ffl | MechanismChoice::Dpffl => {
            let part = apply_opt_out(s, &strategies)?;
            if !part.opted_out.is_empty() {
                return Err(invalid("opt-out strategies are evaluated with the local mechanism"));
            }
            let run = if m == MechanismChoice::Ffl {
                run_ffl(s, &strategies, &ffl_config(cfg, s, ctx.value)?)?
            } else {
                run_dpffl(s, &strategies, &dp_config(cfg, s, ctx.value, mech_seed)?)?
            };
            (vec![run.w_star.clone(); k_total], run.payments.clone(), run.clipped)
        }
    };
    let refs: Vec<&[f64]> = models.iter().map(|w| &w[..]).collect();
    let mut rows = ctx.agent_rows(m.name(), &refs, &payments, &strategies, vcg)?;
    let mut agg = ctx.row(m.name());
    agg.global_loss = Some(
        (0..k_total)
            .map(|k| Ok(s.weights[k] * s.local_risk(k, refs[k])?))
            .sum::<Result<f64>>()?,
    );
    agg.weighted_accuracy = weighted_accuracy(ctx, &refs);
    agg.clipped = Some(clipped);
    if let Some(v) = vcg {
        agg.payment_error = Some(
            payments
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    rows.push(agg);
    Ok(rows)
}

fn weighted_accuracy(ctx: &PointCtx<'_>, models: &[&[f64]]) -> Option<f64> {
    let s = ctx.scenario();
    if !s.loss.is_classification() {
        return None;
    }
    let tests = ctx.eval_sets().unwrap_or(s.datasets.as_slice());
    Some((0..s.num_agents()).map(|k| s.weights[k] * accuracy(s, &tests[k], models[k])).sum())
}

fn run_point(cfg: &ExperimentConfig, g: usize, value: Option<f64>, rep: usize) -> (Vec<ResultRow>, Vec<PointError>) {
    let scenario_seed = child_seed(cfg.seed, "experiment/scenario", rep as u64);
    let seed = child_seed(cfg.seed, "experiment", (g * cfg.repetitions + rep) as u64);
    let err = |mechanism: Option<&str>, e: crate::error::FflError| PointError {
        grid_index: g,
        sweep_value: value,
        repetition: rep,
        mechanism: mechanism.map(str::to_string),
        message: e.to_string(),
    };
    let built = match build_scenario(cfg, value, scenario_seed) {
        Ok(b) => b,
        Err(e) => return (Vec::new(), vec![err(None, e)]),
    };
    let ctx = PointCtx {
        cfg,
        built,
        grid_index: g,
        value,
        repetition: rep,
        seed,
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let s = ctx.scenario();
    let needs_vcg = cfg
        .mechanisms
        .iter()
        .any(|m| matches!(m, MechanismChoice::Ffl | MechanismChoice::Dpffl));
    let mut vcg = None;
    if needs_vcg {
        match vcg_payments_exact(s) {
            Ok(o) => vcg = Some(o.payments),
            Err(e) => errors.push(err(None, e)),
        }
    }
    let mut oracle_row = ctx.row("oracle");
    match solve_exact(s, &s.weights, None, DEFAULT_TOL).and_then(|w| s.global_risk(&w)) {
        Ok(v) => {
            oracle_row.oracle_global_loss = Some(v);
            rows.push(oracle_row);
        }
        Err(e) => errors.push(err(Some("oracle"), e)),
    }
    for &m in &cfg.mechanisms {
        match run_mechanism(&ctx, m, vcg.as_deref()) {
            Ok(r) => rows.extend(r),
            Err(e) => errors.push(err(Some(m.name()), e)),
        }
    }
    (rows, errors)
}

/// Run every (grid point, repetition) in parallel; rows come back sorted.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let grid = cfg.grid();
    let jobs: Vec<(usize, Option<f64>, usize)> = grid
        .iter()
        .enumerate()
        .flat_map(|(g, v)| (0..cfg.repetitions).map(move |r| (g, *v, r)))
        .collect();
    let results: Vec<(Vec<ResultRow>, Vec<PointError>)> =
        jobs.par_iter().map(|&(g, v, r)| run_point(cfg, g, v, r)).collect();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (r, e) in results {
        rows.extend(r);
        errors.extend(e);
    }
    rows.sort_by_key(ResultRow::sort_key);
    errors.sort_by(|a, b| (a.grid_index, a.repetition, &a.mechanism).cmp(&(b.grid_index, b.repetition, &b.mechanism)));
    let crossover = detect_crossover(cfg, &rows);
    Ok(ExperimentResult { rows, errors, crossover })
}

/// Mean per-agent overall cost (payment plus test risk, or empirical risk
/// without test sets) of one mechanism at one grid point.
pub fn mean_agent_cost(rows: &[ResultRow], grid_index: usize, mechanism: &str) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.grid_index == grid_index && r.mechanism == mechanism && r.agent.is_some())
        .filter_map(|r| Some(r.payment? + r.test_risk.or(r.empirical_risk)?))
        .collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn detect_crossover(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Option<f64> {
    let sweep = cfg.sweep.as_ref()?;
    if sweep.variable != SweepVariable::Delta || !cfg.mechanisms.contains(&MechanismChoice::Local) {
        return None;
    }
    let fed = if cfg.mechanisms.contains(&MechanismChoice::Ffl) {
        "ffl"
    } else if cfg.mechanisms.contains(&MechanismChoice::Dpffl) {
        "dpffl"
    } else {
        return None;
    };
    let mut order: Vec<usize> = (0..sweep.values.len()).collect();
    order.sort_by(|&a, &b| sweep.values[a].total_cmp(&sweep.values[b]));
    order.into_iter().find_map(|g| {
        let local = mean_agent_cost(rows, g, "local")?;
        let f = mean_agent_cost(rows, g, fed)?;
        (local < f).then_some(sweep.values[g])
    })
}

const CSV_HEADER: [&str; 19] = [
    "grid_index",
    "sweep_value",
    "repetition",
    "seed",
    "mechanism",
    "agent",
    "payment",
    "empirical_risk",
    "overall_loss",
    "test_risk",
    "test_accuracy",
    "excess_expected_risk",
    "risk_bound",
    "vcg_payment",
    "payment_error",
    "global_loss",
    "weighted_accuracy",
    "oracle_global_loss",
    "clipped",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Rows in the documented column order; empty cells for absent values and
/// `aggregate` in the agent column for whole-system rows.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.grid_index.to_string(),
            opt(r.sweep_value),
            r.repetition.to_string(),
            r.seed.to_string(),
            r.mechanism.clone(),
            r.agent.map_or_else(|| "aggregate".to_string(), |a| a.to_string()),
            opt(r.payment),
            opt(r.empirical_risk),
            opt(r.overall_loss),
            opt(r.test_risk),
            opt(r.test_accuracy),
            opt(r.excess_expected_risk),
            opt(r.risk_bound),
            opt(r.vcg_payment),
            opt(r.payment_error),
            opt(r.global_loss),
            opt(r.weighted_accuracy),
            opt(r.oracle_global_loss),
            opt(r.clipped),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Run the experiment and write `results.csv` and `manifest.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    let start = Instant::now();
    let result = run_grid(cfg)?;
    fs::create_dir_all(out)?;
    write_results_csv(&out.join("results.csv"), &result.rows)?;
    let grid = cfg.grid();
    let seeds: Vec<serde_json::Value> = grid
        .iter()
        .enumerate()
        .flat_map(|(g, v)| {
            (0..cfg.repetitions).map(move |r| {
                serde_json::json!({
                    "grid_index": g,
                    "sweep_value": v,
                    "repetition": r,
                    "scenario_seed": child_seed(cfg.seed, "experiment/scenario", r as u64),
                    "mechanism_seed": child_seed(cfg.seed, "experiment", (g * cfg.repetitions + r) as u64),
                })
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "config": cfg,
        "library_version": env!("CARGO_PKG_VERSION"),
        "master_seed": cfg.seed,
        "seeds": seeds,
        "errors": result.errors,
        "crossover": result.crossover,
        "rows": result.rows.len(),
        "timing": { "wall_time_secs": start.elapsed().as_secs_f64() },
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(result)
}

/// Default desk-scale label-skew configuration (10 agents, Gaussian mixture).
///
/// Classes overlap (spread 1) and regularisation is light (0.01) so that
/// 500 samples per agent leave a visible generalisation gap.
pub fn label_skew_default(delta: f64, seed: u64) -> ExperimentConfig {
    let mut mixture = GaussianMixtureSpec::new(5000, 1000, seed);
    mixture.spread = 1.0;
    ExperimentConfig {
        scenario: ScenarioConfig::LabelSkew {
            spec: LabelSkewSpec {
                num_agents: 10,
                delta,
                reg: 0.01,
                intercept: false,
                weights: WeightScheme::SampleProportional,
                seed,
            },
            source: DataSource::GaussianMixture(mixture),
        },
        mechanisms: vec![MechanismChoice::Ffl, MechanismChoice::FedavgManipulated, MechanismChoice::Local],
        strategies: BTreeMap::new(),
        manipulation: Manipulation::default(),
        ffl: FflParams {
            t1: 1000,
            ..FflParams::default()
        },
        dp: DpParams::default(),
        sweep: None,
        repetitions: 1,
        seed,
        output_dir: None,
        bound_delta: default_bound_delta(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_agent_cfg() -> ExperimentConfig {
        ExperimentConfig {
            scenario: ScenarioConfig::TwoAgent(TwoAgentRegressionSpec::new(20, 40, 0.1, 0)),
            mechanisms: vec![MechanismChoice::Ffl, MechanismChoice::Local, MechanismChoice::FedavgManipulated],
            strategies: BTreeMap::new(),
            manipulation: Manipulation::default(),
            ffl: FflParams {
                t1: 100,
                t2: 5,
                ..FflParams::default()
            },
            dp: DpParams::default(),
            sweep: Some(Sweep {
                variable: SweepVariable::Gamma,
                agent: 0,
                values: vec![1.0, 2.0],
            }),
            repetitions: 2,
            seed: 9,
            output_dir: None,
            bound_delta: 0.01,
        }
    }

    #[test]
    fn grid_is_deterministic_and_sorted() {
        let cfg = two_agent_cfg();
        let a = run_grid(&cfg).unwrap();
        assert!(a.errors.is_empty(), "{:?}", a.errors);
        let b = run_grid(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        // oracle + 3 mechanisms x (2 agents + aggregate), per point
        assert_eq!(a.rows.len(), 2 * 2 * (1 + 3 * 3));
        let keys: Vec<_> = a.rows.iter().map(ResultRow::sort_key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(a.rows.iter().any(|r| r.risk_bound.is_some()));
    }

    #[test]
    fn config_validation() {
        let mut cfg = two_agent_cfg();
        cfg.sweep.as_mut().unwrap().values.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = two_agent_cfg();
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = two_agent_cfg();
        cfg.sweep.as_mut().unwrap().variable = SweepVariable::Delta;
        assert!(cfg.validate().is_err());
        let text = serde_json::to_string(&two_agent_cfg()).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn engine_errors_are_recorded() {
        let mut cfg = two_agent_cfg();
        cfg.ffl.l_f = Some(1e-6);
        let r = run_grid(&cfg).unwrap();
        assert!(r.errors.iter().any(|e| e.mechanism.as_deref() == Some("ffl")));
        assert!(r.rows.iter().any(|r| r.mechanism == "local"));
    }
}
