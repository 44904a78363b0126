//! File writers for evaluation reports, metrics logs and distribution snapshots.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use craftlab_core::eval::{braking_mass, DistributionSnapshot, EvalReport};
use craftlab_core::policy::VocabConfig;
use craftlab_core::trainer::RoundMetrics;
use craftlab_core::theory::{TheoryReport, TheoryRow};
use serde::Serialize;

use crate::error::{io_err, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const EVAL_EPISODES_CSV: &str = "eval_episodes.csv";
pub const THEORY_JSON: &str = "theory_report.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const PRETRAINED_CHECKPOINT: &str = "pretrained_checkpoint.json";

pub fn checkpoint_name(round: u32) -> String {
    format!("checkpoint_round{round}.json")
}

pub fn dist_name(decision_step: usize) -> String {
    format!("dist_step{decision_step}.csv")
}

/// Appends one JSON object per round. Contents depend only on config and seed.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsLog { out: BufWriter::new(File::create(path).map_err(io_err(path))?) })
    }

    pub fn append(&mut self, metrics: &RoundMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, metrics)?;
        self.out.write_all(b"\n").and_then(|_| self.out.flush()).map_err(io_err(METRICS_FILE))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// `eval_report.json`, plus `eval_report.csv` with one row per scenario and an
/// `all` row, and `eval_episodes.csv` with one row per episode.
pub fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join(EVAL_JSON), report)?;
    let mut w = csv::Writer::from_path(dir.join(EVAL_CSV))?;
    for row in report.per_scenario.iter().chain(std::iter::once(&report.aggregate)) {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(dir.join(EVAL_CSV)))?;
    let mut w = csv::Writer::from_path(dir.join(EVAL_EPISODES_CSV))?;
    for ep in &report.episodes {
        w.serialize(ep)?;
    }
    w.flush().map_err(io_err(dir.join(EVAL_EPISODES_CSV)))
}

/// Long-format `(mode, probability)` table with one column per checkpoint.
pub fn write_snapshot(path: &Path, snap: &DistributionSnapshot, labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["mode".to_string(), "lateral_offset".into(), "target_speed".into(), "valid".into()];
    header.extend(labels.iter().map(|l| format!("p_{l}")));
    w.write_record(&header)?;
    for (k, (offset, speed)) in snap.modes.iter().enumerate() {
        let mut rec = vec![k.to_string(), offset.to_string(), speed.to_string(), snap.valid_mask[k].to_string()];
        rec.extend(snap.probabilities.iter().map(|p| p[k].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn eval_table(report: &EvalReport) -> String {
    let mut s = format!(
        "{:<22} {:>5} {:>7} {:>7} {:>6} {:>7} {:>9}\n",
        "scenario", "eps", "SR%", "RC%", "IS", "DS", "coll/ep"
    );
    for r in report.per_scenario.iter().chain(std::iter::once(&report.aggregate)) {
        s += &format!(
            "{:<22} {:>5} {:>7.1} {:>7.1} {:>6.3} {:>7.2} {:>9.3}\n",
            r.scenario, r.episodes, r.success_rate, r.route_completion, r.infraction_score, r.driving_score, r.collisions_per_episode
        );
    }
    s
}

pub fn snapshot_table(snap: &DistributionSnapshot, labels: &[String], vocab: &VocabConfig, braking_speed: f64) -> String {
    let mut s = format!("{} decision {} (world step {})\n", snap.scenario, snap.decision_step, snap.world_step);
    for (label, p) in labels.iter().zip(&snap.probabilities) {
        s += &format!("  {label:<28} braking mass (<= {braking_speed} m/s) {:.4}\n", braking_mass(p, vocab, braking_speed));
    }
    s
}

pub fn theory_table(report: &TheoryReport) -> String {
    let mut s = format!("{:<20} {:<5} {:>9} {:>12} {:>12}  detail\n", "check", "pass", "instances", "worst", "tolerance");
    for r in &report.rows {
        s += &theory_line(r);
    }
    if !report.supplementary.is_empty() {
        s += "supplementary\n";
        for r in &report.supplementary {
            s += &theory_line(r);
        }
    }
    s
}

fn theory_line(r: &TheoryRow) -> String {
    format!(
        "{:<20} {:<5} {:>9} {:>12.3e} {:>12.3e}  {}\n",
        r.check,
        if r.passed { "PASS" } else { "FAIL" },
        r.instances,
        r.worst,
        r.tolerance,
        r.detail
    )
}
