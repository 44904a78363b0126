use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use craftlab::commands::{self, EvalOptions, SnapshotOptions, TrainOverrides};
use craftlab::report;
use craftlab::{CliError, LoadedConfig};
use craftlab_core::trainer::Method;

#[derive(Parser)]
#[command(name = "craftlab", version, about = "Counterfactual fine-tuning laboratory for a toy driving world")]
struct Cli {
    /// Run config (TOML). Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CRAFTLAB_OUT")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Craft,
    Grpo,
    Ppo,
    Reinforcepp,
    Distill,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Craft => Method::Craft,
            MethodArg::Grpo => Method::Grpo,
            MethodArg::Ppo => Method::Ppo,
            MethodArg::Reinforcepp => Method::Reinforcepp,
            MethodArg::Distill => Method::Distill,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Behavior-clone a starting policy, then fine-tune it.
    Train {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of behavior cloning.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Template name or scenario file; repeat for several.
        #[arg(long)]
        scenario: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mode probabilities of one or more checkpoints at a fixed decision step.
    SnapshotDist {
        /// Repeat to compare checkpoints at the same state.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// Decision step, counted from 0.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Numerical checks of the theoretical statements.
    TheoryCheck {
        /// Random instances per check.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
}

fn load(config: Option<&Path>) -> anyhow::Result<LoadedConfig> {
    match config {
        Some(p) => Ok(LoadedConfig::load(p)?),
        None => Ok(LoadedConfig::defaults()),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load(cli.config.as_deref())?;
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Train { method, rounds, seed, checkpoint } => {
            let dir = out_dir.ok_or(CliError::MissingOutDir)?;
            let overrides = TrainOverrides { method: method.map(Into::into), rounds, seed, init: checkpoint };
            let outcome = commands::train(&cfg, &overrides, dir)?;
            println!("{} rounds written to {}", outcome.metrics.len(), dir.display());
        }
        Command::Eval { checkpoint, scenario, episodes, seed } => {
            let opts = EvalOptions { scenarios: (!scenario.is_empty()).then_some(scenario), episodes, seed };
            let report = commands::eval(&cfg, &checkpoint, &opts, out_dir)?;
            print!("{}", report::eval_table(&report));
        }
        Command::SnapshotDist { checkpoint, scenario, step, seed } => {
            let opts = SnapshotOptions { scenario, decision_step: step, seed };
            let (snap, labels) = commands::snapshot(&cfg, &checkpoint, &opts, out_dir)?;
            let c = &cfg.config;
            print!("{}", report::snapshot_table(&snap, &labels, &c.vocab, c.snapshot.braking_speed));
            if out_dir.is_none() {
                println!("(no --out-dir: {} not written)", report::dist_name(snap.decision_step));
            }
        }
        Command::TheoryCheck { seeds, seed, json } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let report = commands::theory(&cfg, seeds, seed, out_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).context("serializing the theory report")?);
            } else {
                print!("{}", report::theory_table(&report));
            }
            if !report.all_passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
