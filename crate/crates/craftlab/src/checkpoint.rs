//! Checkpoint JSON files, tied to the vocabulary they were trained with.

use std::path::Path;

use craftlab_core::objectives::ValueHead;
use craftlab_core::policy::{PolicyParams, TeacherParams, VocabConfig};
use craftlab_core::trainer::TrainState;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Hex FNV-1a digest of the vocabulary config.
    pub vocab_hash: String,
    /// Fine-tuning method; absent for behavior-cloned checkpoints.
    pub method: Option<String>,
    pub round: u32,
    pub seed: u64,
    pub policy: PolicyParams,
    pub teacher: Option<TeacherParams>,
    pub critic: Option<ValueHead>,
}

pub fn vocab_hash(vocab: &VocabConfig) -> String {
    format!("{:016x}", vocab.hash())
}

impl Checkpoint {
    pub fn pretrained(policy: PolicyParams, vocab: &VocabConfig, seed: u64) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            vocab_hash: vocab_hash(vocab),
            method: None,
            round: 0,
            seed,
            policy,
            teacher: None,
            critic: None,
        }
    }

    pub fn from_state(state: &TrainState, method: &str, vocab: &VocabConfig, seed: u64) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            vocab_hash: vocab_hash(vocab),
            method: Some(method.to_string()),
            round: state.round,
            seed,
            policy: state.params.clone(),
            teacher: Some(state.teacher.clone()),
            critic: Some(state.critic.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Reads a checkpoint and rejects it unless it matches `vocab`.
    pub fn load(path: &Path, vocab: &VocabConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(CliError::SchemaVersion { path: path.to_path_buf(), found: ckpt.format_version, expected: FORMAT_VERSION });
        }
        let expected = vocab_hash(vocab);
        if ckpt.vocab_hash != expected {
            return Err(CliError::VocabMismatch { path: path.to_path_buf(), expected, found: ckpt.vocab_hash });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let vocab = VocabConfig::default();
        let policy = PolicyParams { weights: vec![0.5; 7], version: 0 };
        Checkpoint::pretrained(policy.clone(), &vocab, 3).save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path, &vocab).unwrap().policy, policy);
        let other = VocabConfig { target_speeds: vec![0.0, 4.0, 8.0], ..VocabConfig::default() };
        assert!(matches!(Checkpoint::load(&path, &other), Err(CliError::VocabMismatch { .. })));
    }
}
