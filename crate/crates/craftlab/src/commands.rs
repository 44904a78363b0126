//! The four subcommands as library functions. Each writes its artifacts into
//! an output directory and returns the in-memory result.

use std::path::{Path, PathBuf};

use craftlab_core::eval::{evaluate_policy, snapshot_distribution, DistributionSnapshot, EvalReport};
use craftlab_core::policy::PolicyParams;
use craftlab_core::theory::{run_theory_checks, TheoryReport};
use craftlab_core::trainer::{pretrain, run_training, Method, RoundMetrics, TrainState};

use crate::checkpoint::Checkpoint;
use crate::config::LoadedConfig;
use crate::error::{io_err, CliError, Result};
use crate::report::{self, MetricsLog};
use crate::scenario_file;

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub method: Option<Method>,
    pub rounds: Option<u32>,
    pub seed: Option<u64>,
    /// Start from this checkpoint instead of behavior cloning.
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: PolicyParams,
    pub state: TrainState,
    pub metrics: Vec<RoundMetrics>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Behavior-clones the starting policy from the configured pretraining mix.
pub fn pretrained_policy(cfg: &LoadedConfig) -> Result<PolicyParams> {
    let scenarios = cfg.pretrain_scenarios()?;
    Ok(pretrain(&scenarios, &cfg.config.lab(), &cfg.config.pretrain)?)
}

/// Writes `resolved_config.toml`, the starting checkpoint, `metrics.jsonl` and
/// one `checkpoint_round<k>.json` per round.
pub fn train(cfg: &LoadedConfig, overrides: &TrainOverrides, out_dir: &Path) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let train = &mut cfg.config.train;
    if let Some(m) = overrides.method {
        train.method = m;
    }
    if let Some(r) = overrides.rounds {
        train.total_rounds = r;
    }
    if let Some(s) = overrides.seed {
        train.seed = s;
    }
    let lab = cfg.config.lab();
    lab.validate()?;
    let scenarios = cfg.scenarios()?;
    ensure_dir(out_dir)?;
    let resolved = out_dir.join(report::RESOLVED_CONFIG);
    std::fs::write(&resolved, cfg.config.to_toml()).map_err(io_err(&resolved))?;

    let initial = match &overrides.init {
        Some(path) => Checkpoint::load(path, &lab.vocab)?.policy,
        None => {
            log::info!("behavior cloning on {}", cfg.config.pretrain_scenarios.join(", "));
            pretrained_policy(&cfg)?
        }
    };
    Checkpoint::pretrained(initial.clone(), &lab.vocab, cfg.config.pretrain.seed)
        .save(&out_dir.join(report::PRETRAINED_CHECKPOINT))?;

    let mut log = MetricsLog::create(&out_dir.join(report::METRICS_FILE))?;
    let mut metrics = Vec::new();
    let method = lab.train.method.name();
    let state = run_training::<CliError>(initial.clone(), &scenarios, &lab, |state, m| {
        log.append(m)?;
        Checkpoint::from_state(state, method, &lab.vocab, lab.train.seed)
            .save(&out_dir.join(report::checkpoint_name(m.round)))?;
        log::info!(
            "round {}/{}: {} transitions, {} collisions, {} completions",
            m.round,
            lab.train.total_rounds,
            m.buffer.transitions,
            m.buffer.collisions,
            m.buffer.route_completions
        );
        metrics.push(m.clone());
        Ok(())
    })?;
    Ok(TrainOutcome { initial, state, metrics })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Overrides the configured evaluation mix.
    pub scenarios: Option<Vec<String>>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
}

/// Greedy evaluation of the policy stored in `checkpoint`.
pub fn eval(cfg: &LoadedConfig, checkpoint: &Path, opts: &EvalOptions, out_dir: Option<&Path>) -> Result<EvalReport> {
    let lab = cfg.config.lab();
    let ckpt = Checkpoint::load(checkpoint, &lab.vocab)?;
    eval_policy(cfg, &ckpt.policy, opts, out_dir)
}

pub fn eval_policy(cfg: &LoadedConfig, policy: &PolicyParams, opts: &EvalOptions, out_dir: Option<&Path>) -> Result<EvalReport> {
    let c = &cfg.config;
    let scenarios = cfg.resolve(opts.scenarios.as_ref().unwrap_or(&c.scenarios))?;
    let report = evaluate_policy(
        policy,
        &scenarios,
        opts.episodes.unwrap_or(c.eval.episodes),
        opts.seed.unwrap_or(c.eval.seed),
        &c.lab(),
        &c.eval.penalties,
    )?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        report::write_eval(dir, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct SnapshotOptions {
    pub scenario: Option<String>,
    pub decision_step: Option<usize>,
    pub seed: Option<u64>,
}

/// Column labels for checkpoint files: file stems, made unique.
pub fn checkpoint_labels(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> =
        paths.iter().map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()).collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| if stems.iter().filter(|t| *t == s).count() > 1 { format!("{s}_{i}") } else { s.clone() })
        .collect()
}

/// Distributions of every checkpoint at one state reached by the expert.
/// Writes `dist_step<k>.csv` when `out_dir` is given.
pub fn snapshot(
    cfg: &LoadedConfig,
    checkpoints: &[PathBuf],
    opts: &SnapshotOptions,
    out_dir: Option<&Path>,
) -> Result<(DistributionSnapshot, Vec<String>)> {
    let lab = cfg.config.lab();
    let policies = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p, &lab.vocab).map(|c| c.policy))
        .collect::<Result<Vec<_>>>()?;
    let labels = checkpoint_labels(checkpoints);
    let snap = snapshot_policies(cfg, &policies, opts)?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        report::write_snapshot(&dir.join(report::dist_name(snap.decision_step)), &snap, &labels)?;
    }
    Ok((snap, labels))
}

pub fn snapshot_policies(cfg: &LoadedConfig, policies: &[PolicyParams], opts: &SnapshotOptions) -> Result<DistributionSnapshot> {
    let s = &cfg.config.snapshot;
    let scenario = scenario_file::resolve(opts.scenario.as_ref().unwrap_or(&s.scenario), &cfg.base_dir)?;
    Ok(snapshot_distribution(
        policies,
        &scenario,
        opts.seed.unwrap_or(s.seed),
        opts.decision_step.unwrap_or(s.decision_step),
        &cfg.config.lab(),
        &s.expert,
    )?)
}

/// Runs the theory battery with `instances` random instances per check.
/// Writes `theory_report.json` when `out_dir` is given.
pub fn theory(cfg: &LoadedConfig, instances: usize, seed: u64, out_dir: Option<&Path>) -> Result<TheoryReport> {
    let dual_clip_samples = 10_000 * instances.max(1);
    let report = run_theory_checks(&cfg.config.lab(), seed, instances.max(1), dual_clip_samples)?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        report::write_json(&dir.join(report::THEORY_JSON), &report)?;
    }
    Ok(report)
}
