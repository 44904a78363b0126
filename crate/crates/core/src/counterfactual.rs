//! Counterfactual evaluation of candidate groups from a frozen snapshot.
//!
//! Background agents follow the decay model (hold, then ramp to braking) and
//! are open-loop with respect to the ego, so their futures are computed once per
//! group. Each valid candidate is tracked by the PID controller on the bicycle
//! model and scored with the dense step reward.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    decay_rollout_step, track_trajectory, BicycleState, ControlLimits, DecayAgentState, DecayParams, PidGains, Waypoint,
};
use crate::geometry::{sat_overlap, OrientedBox};
use crate::rewards::{dense_step_reward, CounterfactualRewardConfig};
use crate::road::{measure_pose, Lane, RoadMeasure, RoadParams, RouteWindow};
use crate::world::{zone_state, ControlKind, InfractionFlags, PhaseSchedule};
use crate::{stats, Error, Result};

/// Version tag written into every serialized snapshot record.
pub const SNAPSHOT_VERSION: u32 = 1;

/// A traffic control as frozen in a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSnapshot {
    pub kind: ControlKind,
    pub trigger_zone: OrientedBox,
    pub stop_line_arclength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PhaseSchedule>,
    pub phase_offset: u32,
    pub honored: bool,
}

impl ZoneSnapshot {
    /// Whether a pose at `pos` would be in a stop-required zone `t` steps after the snapshot.
    fn stop_required_at(&self, step: u32, inside: bool, honored: bool) -> bool {
        let phase = self.schedule.map(|s| s.phase_at(step, self.phase_offset));
        zone_state(self.kind, inside, phase, honored).stop_required
    }
}

/// Immutable record of a visited state, sufficient to simulate any candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSnapshot {
    pub version: u32,
    pub scenario: String,
    pub step_index: u32,
    pub ego: BicycleState,
    pub ego_half_length: f64,
    pub ego_half_width: f64,
    pub agents: Vec<DecayAgentState>,
    pub route_window: RouteWindow,
    pub lanes: Vec<Lane>,
    pub zones: Vec<ZoneSnapshot>,
    pub v_stop: f64,
}

impl CounterfactualSnapshot {
    pub fn ego_box_at(&self, state: &BicycleState) -> OrientedBox {
        OrientedBox { center: state.pose, half_length: self.ego_half_length, half_width: self.ego_half_width }
    }

    /// Zone membership of the ego right now.
    pub fn zone_flags(&self) -> (bool, bool) {
        let pos = self.ego.pose.position();
        let mut stop = false;
        let mut go = false;
        for z in &self.zones {
            let phase = z.schedule.map(|s| s.phase_at(self.step_index, z.phase_offset));
            let st = zone_state(z.kind, z.trigger_zone.contains(pos), phase, z.honored);
            stop |= st.stop_required;
            go |= st.go_required;
        }
        (stop, go)
    }
}

/// A group of candidate trajectories in the ego frame. Every trajectory has the
/// same number of points; padded entries are flagged invalid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub trajectories: Vec<Vec<Waypoint>>,
    pub logits: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn any_valid(&self) -> bool {
        self.valid_mask.iter().any(|v| *v)
    }

    /// Candidate `g` in the global frame with the current ego pose and speed prepended.
    pub fn global_trajectory(&self, g: usize, ego: &BicycleState) -> Vec<Waypoint> {
        let mut out = Vec::with_capacity(self.trajectories[g].len() + 1);
        out.push(Waypoint { x: ego.pose.x, y: ego.pose.y, speed: ego.speed });
        for w in &self.trajectories[g] {
            let p = ego.pose.to_global(w.position());
            out.push(Waypoint { x: p.x, y: p.y, speed: w.speed });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrajFlags {
    pub red: bool,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualOutcome {
    pub states: Vec<Vec<BicycleState>>,
    pub step_flags: Vec<Vec<InfractionFlags>>,
    pub traj_flags: Vec<TrajFlags>,
    pub step_rewards: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub horizon: usize,
    pub dt: f64,
    pub gains: PidGains,
    pub limits: ControlLimits,
    pub decay: DecayParams,
    pub road: RoadParams,
    pub gamma: f64,
    pub sigma_min: f64,
    /// Candidate rollouts evaluated per batch.
    pub chunk_size: usize,
    pub min_collision_speed: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            horizon: 20,
            dt: 0.1,
            gains: PidGains::default(),
            limits: ControlLimits::default(),
            decay: DecayParams::default(),
            road: RoadParams::default(),
            gamma: 0.98,
            sigma_min: 5.0,
            chunk_size: 500,
            min_collision_speed: 0.1,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) || self.chunk_size == 0 {
            return Err(Error::InvalidConfig("engine: horizon, dt and chunk_size must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.sigma_min > 0.0) {
            return Err(Error::InvalidConfig("engine: need 0 < gamma < 1 and sigma_min > 0".into()));
        }
        Ok(())
    }
}

/// Decay-model futures of every snapshot agent, `horizon + 1` rows starting
/// with the snapshot itself.
pub fn agent_futures(snapshot: &CounterfactualSnapshot, cfg: &EngineConfig) -> Vec<Vec<DecayAgentState>> {
    let mut rows = Vec::with_capacity(cfg.horizon + 1);
    rows.push(snapshot.agents.clone());
    for t in 0..cfg.horizon {
        let next = rows[t].iter().map(|a| decay_rollout_step(a, cfg.dt, &cfg.decay)).collect();
        rows.push(next);
    }
    rows
}

/// Simulated trace of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrace {
    pub states: Vec<BicycleState>,
    /// Road measures for every state, including the initial one.
    pub measures: Vec<RoadMeasure>,
    /// Flags for transitions `t -> t+1`, `horizon` entries.
    pub flags: Vec<InfractionFlags>,
    pub traj_flags: TrajFlags,
}

fn simulate_candidate(
    snapshot: &CounterfactualSnapshot,
    candidates: &CandidateSet,
    g: usize,
    futures: &[Vec<DecayAgentState>],
    cfg: &EngineConfig,
) -> Result<CandidateTrace> {
    let traj = candidates.global_trajectory(g, &snapshot.ego);
    let states = track_trajectory(&snapshot.ego, &traj, cfg.horizon, cfg.dt, &cfg.gains, &cfg.limits)?;
    let measures: Vec<RoadMeasure> = states
        .iter()
        .map(|s| measure_pose(&snapshot.route_window, &snapshot.lanes, &s.pose, &cfg.road))
        .collect();
    let mut flags = Vec::with_capacity(cfg.horizon);
    let mut traj_flags = TrajFlags::default();
    let mut honored: Vec<bool> = snapshot.zones.iter().map(|z| z.honored).collect();
    for t in 1..=cfg.horizon {
        let st = &states[t];
        let m = &measures[t];
        let mut f = InfractionFlags {
            offroad: m.offroad,
            offroute: m.offroute,
            opposite_lane: m.opposite,
            emergency_lane: m.emergency,
            ..Default::default()
        };
        let ego_box = snapshot.ego_box_at(st);
        let ego_v = st.velocity();
        for a in &futures[t] {
            if sat_overlap(&ego_box, &a.footprint) {
                let rel = (ego_v - a.footprint.center.heading() * a.speed).norm();
                if rel >= cfg.min_collision_speed {
                    f.collision = true;
                    f.collision_speed = rel;
                    break;
                }
            }
        }
        let pos = st.pose.position();
        let step = snapshot.step_index + t as u32;
        for (k, z) in snapshot.zones.iter().enumerate() {
            let inside = z.trigger_zone.contains(pos);
            let line = z.stop_line_arclength;
            let crossed = measures[t - 1].route_s < line && m.route_s >= line;
            if crossed && inside && z.stop_required_at(step, inside, honored[k]) && st.speed > snapshot.v_stop {
                match z.kind {
                    ControlKind::RedLight => traj_flags.red = true,
                    ControlKind::StopSign => traj_flags.stop = true,
                }
            }
            if z.kind == ControlKind::StopSign && inside && st.speed <= snapshot.v_stop && m.route_s < line {
                honored[k] = true;
            }
        }
        flags.push(f);
    }
    Ok(CandidateTrace { states, measures, flags, traj_flags })
}

/// Tracks every valid candidate for `cfg.horizon` steps against shared agent futures.
/// Invalid candidates keep the initial state and carry no flags.
pub fn rollout_candidates(
    snapshot: &CounterfactualSnapshot,
    candidates: &CandidateSet,
    cfg: &EngineConfig,
) -> Result<Vec<Option<CandidateTrace>>> {
    if !candidates.any_valid() {
        return Err(Error::EmptyCandidateGroup);
    }
    let futures = agent_futures(snapshot, cfg);
    (0..candidates.len())
        .map(|g| {
            if candidates.valid_mask[g] {
                simulate_candidate(snapshot, candidates, g, &futures, cfg).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Dense per-step rewards of one trace. Steps after the first collision earn nothing.
pub fn trace_rewards(trace: &CandidateTrace, cfg: &CounterfactualRewardConfig) -> Vec<f64> {
    let h = trace.flags.len();
    let mut out = vec![0.0; h];
    for t in 0..h {
        let flags = &trace.flags[t];
        out[t] = dense_step_reward(&trace.measures[t], &trace.measures[t + 1], flags, flags.collision, trace.states[t + 1].speed, cfg);
        if flags.collision {
            break;
        }
    }
    out
}

/// R̃ = Σ γ^t r_t − λ_red·I_red − λ_stop·I_stop.
pub fn counterfactual_return(step_rewards: &[f64], traj_flags: TrajFlags, gamma: f64, lambda_red: f64, lambda_stop: f64) -> f64 {
    let mut ret = 0.0;
    let mut disc = 1.0;
    for r in step_rewards {
        ret += disc * r;
        disc *= gamma;
    }
    if traj_flags.red {
        ret -= lambda_red;
    }
    if traj_flags.stop {
        ret -= lambda_stop;
    }
    ret
}

/// Group-normalized advantages over the valid candidates, with the population
/// standard deviation floored at `sigma_min`. Invalid candidates get exactly 0.
pub fn group_advantages(returns: &[f64], valid_mask: &[bool], sigma_min: f64) -> Vec<f64> {
    let valid: Vec<f64> = returns.iter().zip(valid_mask).filter(|(_, v)| **v).map(|(r, _)| *r).collect();
    if valid.is_empty() {
        return vec![0.0; returns.len()];
    }
    let mu = stats::mean(&valid);
    let sigma = stats::std_pop(&valid).max(sigma_min);
    returns.iter().zip(valid_mask).map(|(r, v)| if *v { (r - mu) / sigma } else { 0.0 }).collect()
}

fn outcome_from_traces(
    snapshot: &CounterfactualSnapshot,
    candidates: &CandidateSet,
    traces: Vec<Option<CandidateTrace>>,
    reward: &CounterfactualRewardConfig,
    cfg: &EngineConfig,
) -> CounterfactualOutcome {
    let n = candidates.len();
    let mut out = CounterfactualOutcome {
        states: Vec::with_capacity(n),
        step_flags: Vec::with_capacity(n),
        traj_flags: Vec::with_capacity(n),
        step_rewards: Vec::with_capacity(n),
        returns: Vec::with_capacity(n),
        advantages: Vec::new(),
    };
    for trace in traces {
        match trace {
            Some(tr) => {
                let rewards = trace_rewards(&tr, reward);
                let ret = counterfactual_return(&rewards, tr.traj_flags, cfg.gamma, reward.lambda_red, reward.lambda_stop);
                out.states.push(tr.states);
                out.step_flags.push(tr.flags);
                out.traj_flags.push(tr.traj_flags);
                out.step_rewards.push(rewards);
                out.returns.push(ret);
            }
            None => {
                out.states.push(vec![snapshot.ego; cfg.horizon + 1]);
                out.step_flags.push(vec![InfractionFlags::default(); cfg.horizon]);
                out.traj_flags.push(TrajFlags::default());
                out.step_rewards.push(vec![0.0; cfg.horizon]);
                out.returns.push(0.0);
            }
        }
    }
    out.advantages = group_advantages(&out.returns, &candidates.valid_mask, cfg.sigma_min);
    out
}

/// Full counterfactual evaluation of one candidate group.
pub fn evaluate_group(
    snapshot: &CounterfactualSnapshot,
    candidates: &CandidateSet,
    reward: &CounterfactualRewardConfig,
    cfg: &EngineConfig,
) -> Result<CounterfactualOutcome> {
    let traces = rollout_candidates(snapshot, candidates, cfg)?;
    Ok(outcome_from_traces(snapshot, candidates, traces, reward, cfg))
}

/// Evaluates many groups by flattening (group, candidate) pairs and processing
/// them `cfg.chunk_size` rollouts at a time. Results do not depend on the chunk size.
pub fn evaluate_groups(
    groups: &[(&CounterfactualSnapshot, &CandidateSet)],
    reward: &CounterfactualRewardConfig,
    cfg: &EngineConfig,
) -> Result<Vec<CounterfactualOutcome>> {
    for (_, c) in groups {
        if !c.any_valid() {
            return Err(Error::EmptyCandidateGroup);
        }
    }
    let pairs: Vec<(usize, usize)> =
        groups.iter().enumerate().flat_map(|(i, (_, c))| (0..c.len()).map(move |g| (i, g))).collect();
    let mut traces: Vec<Vec<Option<CandidateTrace>>> = groups.iter().map(|(_, c)| vec![None; c.len()]).collect();
    let mut futures_cache: Option<(usize, Vec<Vec<DecayAgentState>>)> = None;
    for chunk in pairs.chunks(cfg.chunk_size.max(1)) {
        for &(i, g) in chunk {
            let (snap, cands) = groups[i];
            if !cands.valid_mask[g] {
                continue;
            }
            if futures_cache.as_ref().is_none_or(|(k, _)| *k != i) {
                futures_cache = Some((i, agent_futures(snap, cfg)));
            }
            let futures = &futures_cache.as_ref().map(|(_, f)| f).ok_or(Error::EmptyCandidateGroup)?;
            traces[i][g] = Some(simulate_candidate(snap, cands, g, futures, cfg)?);
        }
    }
    Ok(groups
        .iter()
        .zip(traces)
        .map(|((snap, cands), tr)| outcome_from_traces(snap, cands, tr, reward, cfg))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Polyline, Pose2D, Vec2};
    use crate::road::LaneTag;

    fn snapshot(agents: Vec<DecayAgentState>) -> CounterfactualSnapshot {
        let line = Polyline::new(vec![Vec2::new(-10.0, 0.0), Vec2::new(200.0, 0.0)]).unwrap();
        CounterfactualSnapshot {
            version: SNAPSHOT_VERSION,
            scenario: "test".into(),
            step_index: 0,
            ego: BicycleState::new(Pose2D::new(0.0, 0.0, 0.0), 0.0, 2.7),
            ego_half_length: 2.25,
            ego_half_width: 0.95,
            agents,
            route_window: RouteWindow::of(&line, 10.0, 80.0).unwrap(),
            lanes: vec![Lane { centerline: line, width: 3.5, tag: LaneTag::Driving }],
            zones: vec![],
            v_stop: 0.1,
        }
    }

    fn straight(speed: f64, n: usize) -> Vec<Waypoint> {
        (1..=n).map(|k| Waypoint { x: speed * 0.1 * k as f64, y: 0.0, speed }).collect()
    }

    fn stay(n: usize) -> Vec<Waypoint> {
        vec![Waypoint::default(); n]
    }

    #[test]
    fn return_examples() {
        assert_eq!(counterfactual_return(&[0.0; 20], TrajFlags::default(), 0.98, 40.0, 40.0), 0.0);
        assert_eq!(counterfactual_return(&[0.0; 20], TrajFlags { red: true, stop: false }, 0.98, 40.0, 40.0), -40.0);
        let r = counterfactual_return(&[1.0; 20], TrajFlags::default(), 0.98, 40.0, 40.0);
        assert!((r - (1.0 - 0.98f64.powi(20)) / 0.02).abs() < 1e-12);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[3.0, 3.0], &[true, true], 5.0), vec![0.0, 0.0]);
        assert_eq!(group_advantages(&[0.0, 10.0], &[true, true], 5.0), vec![-1.0, 1.0]);
        let a = group_advantages(&[0.0, 1.0], &[true, true], 5.0);
        assert!((a[0] + 0.1).abs() < 1e-15 && (a[1] - 0.1).abs() < 1e-15);
        assert_eq!(group_advantages(&[0.0, 10.0, 99.0], &[true, true, false], 5.0)[2], 0.0);
    }

    #[test]
    fn all_invalid_is_an_error() {
        let c = CandidateSet { trajectories: vec![stay(20)], logits: vec![0.0], valid_mask: vec![false] };
        let err = evaluate_group(&snapshot(vec![]), &c, &CounterfactualRewardConfig::default(), &EngineConfig::default());
        assert_eq!(err, Err(Error::EmptyCandidateGroup));
    }

    #[test]
    fn stay_stopped_has_no_collision() {
        let c = CandidateSet { trajectories: vec![stay(20)], logits: vec![0.0], valid_mask: vec![true] };
        let out = evaluate_group(&snapshot(vec![]), &c, &CounterfactualRewardConfig::default(), &EngineConfig::default()).unwrap();
        assert_eq!(out.states[0].len(), 21);
        assert!(out.step_flags[0].iter().all(|f| !f.collision));
    }

    #[test]
    fn head_on_collision_is_flagged_at_overlap() {
        let agent = DecayAgentState {
            footprint: OrientedBox::new(Pose2D::new(30.0, 0.0, core::f64::consts::PI), 2.25, 0.95).unwrap(),
            speed: 10.0,
            held_accel: 0.0,
            held_steer: 0.0,
            on_connector: false,
            step_index: 0,
        };
        let mut snap = snapshot(vec![agent]);
        snap.ego.speed = 10.0;
        let c = CandidateSet { trajectories: vec![straight(10.0, 20)], logits: vec![0.0], valid_mask: vec![true] };
        let traces = rollout_candidates(&snap, &c, &EngineConfig::default()).unwrap();
        let tr = traces[0].as_ref().unwrap();
        let first = tr.flags.iter().position(|f| f.collision).expect("collision");
        assert!(first > 0);
        assert!(tr.flags[..first].iter().all(|f| !f.collision));
        let rewards = trace_rewards(tr, &CounterfactualRewardConfig::default());
        assert!(rewards[first] < -40.0);
        assert!(rewards[first + 1..].iter().all(|r| *r == 0.0));
    }

    #[test]
    fn chunking_is_invariant() {
        let snap = snapshot(vec![]);
        let c = CandidateSet {
            trajectories: vec![stay(20), straight(5.0, 20), straight(8.0, 20)],
            logits: vec![0.0; 3],
            valid_mask: vec![true, true, false],
        };
        let groups = [(&snap, &c), (&snap, &c)];
        let r = CounterfactualRewardConfig::default();
        let a = evaluate_groups(&groups, &r, &EngineConfig { chunk_size: 1, ..Default::default() }).unwrap();
        let b = evaluate_groups(&groups, &r, &EngineConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], evaluate_group(&snap, &c, &r, &EngineConfig::default()).unwrap());
    }
}
