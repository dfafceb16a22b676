//! `ffl`: run experiment grids, the acceptance suite, and the planners.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ffl_core::dp::{plan_L_theorem3, plan_tradeoff_prop9};
use ffl_core::experiment::{run_experiment, ExperimentConfig};
use ffl_core::ffl::plan_hyperparams_theorem1;
use ffl_core::model::ConstantsCertificate;
use ffl_core::verify::{verify_suite, SuiteSize};

#[derive(Parser)]
#[command(name = "ffl", version, about = "Faithful federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the acceptance suite and print a claim/measured/bound/verdict table.
    Verify {
        /// Reduced trial counts for a smoke run.
        #[arg(long)]
        quick: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print planner output.
    Plan(PlanArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Theorem {
    #[value(name = "1")]
    One,
    #[value(name = "3")]
    Three,
    #[value(name = "prop9")]
    Prop9,
}

#[derive(clap::Args)]
struct PlanArgs {
    #[arg(long, value_enum)]
    theorem: Theorem,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 2.0)]
    l_g: f64,
    #[arg(long, default_value_t = 1.0)]
    l_ell: f64,
    #[arg(long, default_value_t = 1.2)]
    l_f: f64,
    /// Phase I accuracy target (theorem 1).
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Initial distance to the optimum (theorem 1).
    #[arg(long, default_value_t = 1.0)]
    g: f64,
    /// Smallest local sample count (prop9).
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Model dimension (prop9).
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    /// Phase II step size (prop9); defaults to `1/((K-1) L_g)`.
    #[arg(long)]
    eta2: Option<f64>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn config<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn cmd_run(
    path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> std::result::Result<(), Failure> {
    let text = config(std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())))?;
    let mut cfg = config(ExperimentConfig::from_json(&text).context("invalid experiment config"))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = config(
        out.or_else(|| cfg.output_dir.clone())
            .context("no output directory: pass --out or set output_dir"),
    )?;
    if let Some(n) = threads {
        config(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the worker pool"),
        )?;
    }
    let result = run_experiment(&cfg, &out)
        .context("running experiment")
        .map_err(Failure::Runtime)?;
    println!(
        "wrote {} rows to {}; {} grid point errors",
        result.rows.len(),
        out.join("results.csv").display(),
        result.errors.len()
    );
    for e in &result.errors {
        eprintln!(
            "grid {} rep {} {}: {}",
            e.grid_index,
            e.repetition,
            e.mechanism.as_deref().unwrap_or("scenario"),
            e.message
        );
    }
    if let Some(d) = result.crossover {
        println!("crossover at delta = {d}");
    }
    Ok(())
}

fn cmd_verify(quick: bool, json: Option<PathBuf>) -> std::result::Result<bool, Failure> {
    let size = if quick { SuiteSize::quick() } else { SuiteSize::full() };
    let report = verify_suite(size);
    print!("{}", report.table());
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&report)
            .context("serialising report")
            .map_err(Failure::Runtime)?;
        std::fs::write(&p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Runtime)?;
    }
    Ok(report.all_pass())
}

fn cmd_plan(a: PlanArgs) -> Result<String> {
    let c = ConstantsCertificate::new(a.mu, a.l_g, a.l_ell, a.l_f)?;
    let v = match a.theorem {
        Theorem::One => serde_json::to_value(plan_hyperparams_theorem1(&c, a.k, a.epsilon, a.delta, a.g)?)?,
        Theorem::Three => serde_json::json!({ "k": a.k, "epsilon": a.epsilon, "L": plan_L_theorem3(&c, a.k, a.epsilon)? }),
        Theorem::Prop9 => {
            let eta2 = a.eta2.unwrap_or(1.0 / ((a.k.max(2) - 1) as f64 * a.l_g));
            let plan = plan_tradeoff_prop9(&c, a.k, a.n, a.d, a.alpha, a.beta, eta2, a.epsilon)?;
            serde_json::json!({ "eta2": eta2, "plan": plan })
        }
    };
    Ok(serde_json::to_string_pretty(&v)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => cmd_run(config, out, seed, threads).map(|_| true),
        Command::Verify { quick, json } => cmd_verify(quick, json),
        Command::Plan(a) => cmd_plan(a).map(|s| println!("{s}")).map(|_| true).map_err(Failure::Config),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
