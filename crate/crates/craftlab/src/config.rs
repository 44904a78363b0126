//! Run configuration. A TOML document whose sections mirror the core config
//! structs; every key is optional and falls back to the built-in default.

use std::path::{Path, PathBuf};

use craftlab_core::counterfactual::EngineConfig;
use craftlab_core::eval::PenaltyFactors;
use craftlab_core::objectives::ObjectiveWeights;
use craftlab_core::policy::{ExpertConfig, VocabConfig};
use craftlab_core::rewards::{CorrectiveRewardConfig, CounterfactualRewardConfig};
use craftlab_core::trainer::{BcConfig, LabConfig, TrainConfig};
use craftlab_core::world::{Scenario, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};
use crate::scenario_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seed: u64,
    pub penalties: PenaltyFactors,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { episodes: 30, seed: 99, penalties: PenaltyFactors::default() }
    }
}

/// Where `snapshot-dist` queries the checkpoints by default. Decision 7 of
/// world seed 1 is the last one before the pedestrian reaches the lane edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotSettings {
    pub scenario: String,
    pub decision_step: usize,
    pub seed: u64,
    /// Modes at or below this target speed count as braking-compatible.
    pub braking_speed: f64,
    /// Rule-based driver that leads the episode up to the queried step.
    pub expert: ExpertConfig,
}

impl Default for SnapshotSettings {
    fn default() -> Self {
        SnapshotSettings { scenario: "pedestrian_crossing".into(), decision_step: 7, seed: 1, braking_speed: 2.0, expert: ExpertConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fine-tuning and evaluation mix: template names or scenario file paths.
    pub scenarios: Vec<String>,
    /// Scenarios the behavior-cloned starting point is fitted on.
    pub pretrain_scenarios: Vec<String>,
    /// Seeds of multi-seed studies; `train` itself uses `train.seed`.
    pub seeds: Vec<u64>,
    pub eval: EvalSettings,
    pub snapshot: SnapshotSettings,
    pub pretrain: BcConfig,
    pub world: WorldConfig,
    pub vocab: VocabConfig,
    pub engine: EngineConfig,
    pub cf_reward: CounterfactualRewardConfig,
    pub corrective: CorrectiveRewardConfig,
    pub objectives: ObjectiveWeights,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mix = vec!["pedestrian_crossing".to_string(), "left_turn".to_string()];
        RunConfig {
            scenarios: mix.clone(),
            pretrain_scenarios: mix,
            seeds: vec![1, 2, 3, 4, 5],
            eval: EvalSettings::default(),
            snapshot: SnapshotSettings::default(),
            pretrain: BcConfig::default(),
            world: WorldConfig::default(),
            vocab: VocabConfig::default(),
            engine: EngineConfig::default(),
            cf_reward: CounterfactualRewardConfig::default(),
            corrective: CorrectiveRewardConfig::default(),
            objectives: ObjectiveWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn lab(&self) -> LabConfig {
        LabConfig {
            world: self.world,
            vocab: self.vocab.clone(),
            engine: self.engine,
            cf_reward: self.cf_reward,
            corrective: self.corrective,
            objectives: self.objectives,
            train: self.train,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes to TOML")
    }
}

/// A parsed config plus the directory relative scenario paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// Dotted keys that were absent and took their default.
    pub defaulted: Vec<String>,
}

impl LoadedConfig {
    /// Built-in defaults, with scenario paths relative to the working directory.
    pub fn defaults() -> Self {
        LoadedConfig { config: RunConfig::default(), base_dir: PathBuf::from("."), defaulted: Vec::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut loaded = Self::parse(&text, path)?;
        loaded.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(loaded)
    }

    /// Parses `text`; `origin` only labels diagnostics.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |message: String| CliError::Parse { path: origin.to_path_buf(), message };
        let config: RunConfig = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let given: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let full = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut defaulted = Vec::new();
        missing_keys(&full, &given, "", &mut defaulted);
        for key in &defaulted {
            log::info!("{}: `{key}` not set, using the default", origin.display());
        }
        config.lab().validate().map_err(|e| parse_err(e.to_string()))?;
        Ok(LoadedConfig { config, base_dir: PathBuf::new(), defaulted })
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        self.resolve(&self.config.scenarios)
    }

    pub fn pretrain_scenarios(&self) -> Result<Vec<Scenario>> {
        self.resolve(&self.config.pretrain_scenarios)
    }

    pub fn resolve(&self, names: &[String]) -> Result<Vec<Scenario>> {
        names.iter().map(|n| scenario_file::resolve(n, &self.base_dir)).collect()
    }
}

/// Keys of `full` absent from `given`. A missing table is reported once, not
/// key by key.
fn missing_keys(full: &toml::Table, given: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in full {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, given.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(f), Some(toml::Value::Table(g))) => missing_keys(f, g, &path, out),
            _ => {}
        }
    }
}
