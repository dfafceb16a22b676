//! Execution records shared by both mechanisms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dp::{ClusterPartition, NoiseCalibration};
use crate::error::Result;
use crate::model::ModelVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Ffl,
    DpFfl,
    FedAvg,
}

/// One row of a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Objective value at the iterate (true local risks, not reports).
    pub loss: f64,
    /// Norm of the aggregated (possibly manipulated or noisy) report.
    pub grad_norm: f64,
    pub running_payment: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Ran at least `T2` iterations and met the gradient criterion.
    CriterionMet,
    /// Hit the iteration cap before the criterion held.
    CriterionUnmet,
    /// Ran a fixed number of iterations.
    FixedIterations,
    /// Nobody else reports; the payment is an empty sum.
    NoOtherAgents,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<RoundRecord>,
    /// Model iterates, present when iterate recording is enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<ModelVector>,
}

impl Trace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "loss", "grad_norm", "running_payment"])?;
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.running_payment.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Phase II subproblem: one excluded agent (FFL) or cluster (DP-FFL).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Trace {
    pub excluded: Vec<usize>,
    pub iterations: usize,
    pub termination: Termination,
    pub final_model: ModelVector,
    pub trace: Trace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismRun {
    pub kind: MechanismKind,
    pub w_star: ModelVector,
    pub payments: Vec<f64>,
    pub phase1: Trace,
    pub phase2: Vec<Phase2Trace>,
    /// Set when any gradient was rescaled to the configured bound.
    pub clipped: bool,
    pub seed: Option<u64>,
    pub noise: Option<NoiseCalibration>,
    pub partition: Option<ClusterPartition>,
    /// Payment noise draws `n_{P,k}` (DP-FFL only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payment_noise: Vec<f64>,
    pub config: serde_json::Value,
}

impl MechanismRun {
    pub fn total_payment(&self) -> f64 {
        self.payments.iter().sum()
    }

    /// Weak budget balance with every individual payment nonnegative.
    pub fn budget_balanced(&self) -> bool {
        self.payments.iter().all(|p| *p >= 0.0) && self.total_payment() >= 0.0
    }

    pub fn termination_reasons(&self) -> Vec<Termination> {
        self.phase2.iter().map(|p| p.termination).collect()
    }

    /// Write `manifest.json` plus one CSV per trace into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::json!({
            "kind": self.kind,
            "config": self.config,
            "seed": self.seed,
            "w_star": self.w_star,
            "payments": self.payments,
            "payment_noise": self.payment_noise,
            "clipped": self.clipped,
            "noise": self.noise,
            "partition": self.partition,
            "phase1_rounds": self.phase1.records.len(),
            "phase2": self.phase2.iter().map(|p| serde_json::json!({
                "excluded": p.excluded,
                "iterations": p.iterations,
                "termination": p.termination,
            })).collect::<Vec<_>>(),
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        self.phase1.write_csv(&dir.join("phase1.csv"))?;
        for (i, p) in self.phase2.iter().enumerate() {
            p.trace.write_csv(&dir.join(format!("phase2_{i}.csv")))?;
        }
        Ok(())
    }
}
