use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedBox, Polyline};
use crate::road::Lane;
use crate::{Error, Result};

/// Closed interval of a randomized real quantity. `lo == hi` means fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::InvalidScenario(format!("{what}: range [{}, {}] is not ordered", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Closed interval of a randomized step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub lo: u32,
    pub hi: u32,
}

impl StepRange {
    pub const fn fixed(v: u32) -> Self {
        StepRange { lo: v, hi: v }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalPhase {
    Green,
    Red,
}

/// Fixed-cycle light: `green_steps` of green then `red_steps` of red, shifted
/// by a per-episode offset drawn from `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub green_steps: u32,
    pub red_steps: u32,
    pub offset: StepRange,
}

impl PhaseSchedule {
    pub fn phase_at(&self, step: u32, offset: u32) -> SignalPhase {
        let cycle = self.green_steps + self.red_steps;
        if cycle == 0 || (step + offset) % cycle < self.green_steps {
            SignalPhase::Green
        } else {
            SignalPhase::Red
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    RedLight,
    StopSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficControl {
    pub kind: ControlKind,
    pub trigger_zone: OrientedBox,
    /// Route arclength of the stop line.
    pub stop_line_arclength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PhaseSchedule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentBehavior {
    /// Car-following along the path: reacts to the ego, other agents and pedestrians.
    Reactive,
    /// Holds its initial speed along the path regardless of traffic.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub path: Polyline,
    pub half_length: f64,
    pub half_width: f64,
    /// Initial arclength along `path`.
    pub start: Range,
    pub speed: Range,
    /// Cruise speed for reactive agents; ignored for scripted ones.
    pub desired_speed: Range,
    pub behavior: AgentBehavior,
    /// Arclength span of `path` that lies on a junction connector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connector: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PedestrianSpec {
    pub spawn_step: StepRange,
    pub crossing: Polyline,
    pub speed: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub initial_speed: Range,
    pub half_length: f64,
    pub half_width: f64,
    pub wheelbase: f64,
}

impl Default for EgoSpec {
    fn default() -> Self {
        EgoSpec { initial_speed: Range::fixed(0.0), half_length: 2.25, half_width: 0.95, wheelbase: 2.7 }
    }
}

/// A closed-loop scene: static road geometry, the ego's route, controls,
/// background agents and pedestrian events with their randomization ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub lanes: Vec<Lane>,
    pub route: Polyline,
    #[serde(default)]
    pub traffic_controls: Vec<TrafficControl>,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianSpec>,
    pub ego: EgoSpec,
    pub max_steps: u32,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(format!("{}: {m}", self.name)));
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.lanes.is_empty() {
            return bad("no lanes".into());
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if !(lane.width > 0.0) {
                return bad(format!("lane {i} has non-positive width"));
            }
        }
        for (k, p) in self.route.points().iter().enumerate() {
            let inside = self.lanes.iter().any(|l| l.centerline.project(*p).distance <= 0.5 * l.width + 1e-9);
            if !inside {
                return bad(format!("route vertex {k} ({:.2}, {:.2}) lies outside every lane", p.x, p.y));
            }
        }
        for (i, c) in self.traffic_controls.iter().enumerate() {
            if c.kind == ControlKind::RedLight && c.schedule.is_none() {
                return bad(format!("traffic light {i} has no phase schedule"));
            }
            if !(0.0..=self.route.length()).contains(&c.stop_line_arclength) {
                return bad(format!("control {i}: stop line beyond the route"));
            }
        }
        let e = &self.ego;
        e.initial_speed.check("ego.initial_speed")?;
        if !(e.half_length > 0.0 && e.half_width > 0.0 && e.wheelbase > 0.0) {
            return bad("ego extents and wheelbase must be positive".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            a.start.check("agent.start")?;
            a.speed.check("agent.speed")?;
            a.desired_speed.check("agent.desired_speed")?;
            if a.speed.lo < 0.0 || !(a.half_length > 0.0 && a.half_width > 0.0) {
                return bad(format!("agent {i}: negative speed or non-positive extents"));
            }
        }
        for (i, p) in self.pedestrians.iter().enumerate() {
            p.speed.check("pedestrian.speed")?;
            if p.spawn_step.lo > p.spawn_step.hi || p.speed.lo < 0.0 {
                return bad(format!("pedestrian {i}: bad spawn or speed range"));
            }
        }
        Ok(())
    }
}
