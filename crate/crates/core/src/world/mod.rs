//! The closed-loop micro-world: reset, reactive traffic, signals, pedestrians,
//! infraction detection and termination.

mod scenario;
pub mod templates;

pub use scenario::{
    AgentBehavior, AgentSpec, ControlKind, EgoSpec, PedestrianSpec, PhaseSchedule, Range, Scenario, SignalPhase,
    StepRange, TrafficControl,
};

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{CounterfactualSnapshot, ZoneSnapshot, SNAPSHOT_VERSION};
use crate::dynamics::{bicycle_step, BicycleState, ControlInput, ControlLimits, DecayAgentState};
use crate::geometry::{box_gap, normalize_angle, sat_overlap, OrientedBox, Pose2D, Vec2};
use crate::road::{measure_pose, nearby_lanes, RoadMeasure, RoadParams, RouteWindow};
use crate::{Error, Result};

/// Intelligent-driver-model constants for reactive agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub exponent: f64,
    /// How far ahead along its path an agent looks for leaders.
    pub sensing_range: f64,
    /// Lateral half-width of the corridor in which an obstacle counts as a leader.
    pub corridor: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            max_accel: 2.0,
            comfort_decel: 3.0,
            time_headway: 1.2,
            min_gap: 2.0,
            exponent: 4.0,
            sensing_range: 50.0,
            corridor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub dt: f64,
    pub limits: ControlLimits,
    pub road: RoadParams,
    pub idm: IdmParams,
    pub v_stop: f64,
    pub v_go: f64,
    /// Contacts slower than this relative speed are not collisions.
    pub min_collision_speed: f64,
    /// Consecutive offroute steps that end an episode.
    pub offroute_patience: u32,
    /// Radius within which agents and lanes enter a counterfactual snapshot.
    pub sensing_radius: f64,
    /// Length of the box ahead of the ego checked for a clear path.
    pub clear_path_length: f64,
    pub clear_path_width: f64,
    /// Distance before the route end that counts as route completion.
    pub goal_tolerance: f64,
    /// Route length kept in a snapshot beyond the current progress.
    pub route_window_length: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dt: 0.1,
            limits: ControlLimits::default(),
            road: RoadParams::default(),
            idm: IdmParams::default(),
            v_stop: 0.1,
            v_go: 2.0,
            min_collision_speed: 0.1,
            offroute_patience: 20,
            sensing_radius: 60.0,
            clear_path_length: 10.0,
            clear_path_width: 3.5,
            goal_tolerance: 2.0,
            route_window_length: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InfractionFlags {
    pub collision: bool,
    pub offroad: bool,
    pub offroute: bool,
    pub opposite_lane: bool,
    pub emergency_lane: bool,
    pub red_violation: bool,
    pub stop_violation: bool,
    pub go_blocked_slow: bool,
    /// Relative speed of the first detected contact, 0 without a collision.
    pub collision_speed: f64,
}

impl InfractionFlags {
    pub fn any(&self) -> bool {
        self.collision
            || self.offroad
            || self.offroute
            || self.opposite_lane
            || self.emergency_lane
            || self.red_violation
            || self.stop_violation
            || self.go_blocked_slow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Collision,
    RouteComplete,
    Timeout,
    OffrouteExceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub spec: usize,
    pub active: bool,
    pub s: f64,
    pub speed: f64,
    pub desired_speed: f64,
    pub footprint: OrientedBox,
    pub last_accel: f64,
    pub last_steer: f64,
    pub on_connector: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianState {
    pub spec: usize,
    pub spawn_step: u32,
    pub active: bool,
    pub finished: bool,
    pub s: f64,
    pub speed: f64,
    pub footprint: OrientedBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlStatus {
    pub phase: Option<SignalPhase>,
    pub phase_offset: u32,
    pub honored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub ego: BicycleState,
    pub ego_half_length: f64,
    pub ego_half_width: f64,
    pub agents: Vec<AgentState>,
    pub pedestrians: Vec<PedestrianState>,
    pub controls: Vec<ControlStatus>,
    pub step_index: u32,
    pub route_progress: f64,
    pub offroute_streak: u32,
    pub terminal: Option<TerminalReason>,
    pub rng: ChaCha8Rng,
}

impl WorldState {
    pub fn ego_box(&self) -> OrientedBox {
        OrientedBox { center: self.ego.pose, half_length: self.ego_half_length, half_width: self.ego_half_width }
    }

    /// Footprints and velocities of every active obstacle (agents then pedestrians).
    pub fn obstacles(&self) -> impl Iterator<Item = (OrientedBox, Vec2)> + '_ {
        let agents =
            self.agents.iter().filter(|a| a.active).map(|a| (a.footprint, a.footprint.center.heading() * a.speed));
        let peds = self
            .pedestrians
            .iter()
            .filter(|p| p.active)
            .map(|p| (p.footprint, p.footprint.center.heading() * p.speed));
        agents.chain(peds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: WorldState,
    pub flags: InfractionFlags,
    pub terminal: bool,
    pub terminal_reason: Option<TerminalReason>,
    /// Road measures of the ego after the step.
    pub road: RoadMeasure,
}

/// Half extent of the square footprint standing in for a pedestrian.
pub const PEDESTRIAN_HALF_EXTENT: f64 = 0.3;

fn agent_pose(spec: &AgentSpec, s: f64) -> Pose2D {
    spec.path.pose_at(s)
}

fn pedestrian_box(spec: &PedestrianSpec, s: f64) -> OrientedBox {
    OrientedBox { center: spec.crossing.pose_at(s), half_length: PEDESTRIAN_HALF_EXTENT, half_width: PEDESTRIAN_HALF_EXTENT }
}

fn in_span(span: Option<[f64; 2]>, s: f64) -> bool {
    span.is_some_and(|[a, b]| s >= a && s <= b)
}

/// Places the ego at the route start and draws every randomized quantity.
pub fn reset(scenario: &Scenario, seed: u64) -> Result<WorldState> {
    scenario.validate()?;
    let mut rng = crate::seeded_rng(seed, 0x5745_4c44);
    let ego_speed = scenario.ego.initial_speed.sample(&mut rng).max(0.0);
    let controls = scenario
        .traffic_controls
        .iter()
        .map(|c| {
            let phase_offset = c.schedule.map_or(0, |s| s.offset.sample(&mut rng));
            ControlStatus { phase: c.schedule.map(|s| s.phase_at(0, phase_offset)), phase_offset, honored: false }
        })
        .collect();
    let agents = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let s = a.start.sample(&mut rng).clamp(0.0, a.path.length());
            let speed = a.speed.sample(&mut rng);
            let desired_speed = a.desired_speed.sample(&mut rng);
            AgentState {
                spec: i,
                active: true,
                s,
                speed,
                desired_speed,
                footprint: OrientedBox { center: agent_pose(a, s), half_length: a.half_length, half_width: a.half_width },
                last_accel: 0.0,
                last_steer: 0.0,
                on_connector: in_span(a.connector, s),
            }
        })
        .collect();
    let pedestrians = scenario
        .pedestrians
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let spawn_step = p.spawn_step.sample(&mut rng);
            let speed = p.speed.sample(&mut rng);
            PedestrianState {
                spec: i,
                spawn_step,
                active: spawn_step == 0,
                finished: false,
                s: 0.0,
                speed,
                footprint: pedestrian_box(p, 0.0),
            }
        })
        .collect();
    let start = scenario.route.pose_at(0.0);
    Ok(WorldState {
        ego: BicycleState::new(start, ego_speed, scenario.ego.wheelbase),
        ego_half_length: scenario.ego.half_length,
        ego_half_width: scenario.ego.half_width,
        agents,
        pedestrians,
        controls,
        step_index: 0,
        route_progress: 0.0,
        offroute_streak: 0,
        terminal: None,
        rng,
    })
}

/// Intelligent-driver acceleration for a free-road speed `v0` and an optional
/// leader `(gap, leader speed along the path)`.
pub fn idm_accel(v: f64, v0: f64, leader: Option<(f64, f64)>, p: &IdmParams) -> f64 {
    let free = if v0 > 0.0 { 1.0 - (v / v0).powf(p.exponent) } else { -1.0 };
    let interaction = match leader {
        None => 0.0,
        Some((gap, _)) if gap <= 1e-3 => return f64::NEG_INFINITY,
        Some((gap, lead_v)) => {
            let dv = v - lead_v;
            let s_star = p.min_gap + (v * p.time_headway + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0);
            (s_star / gap).powi(2)
        }
    };
    p.max_accel * (free - interaction)
}

/// Extent of `b` along the unit direction `dir`.
fn half_extent_along(b: &OrientedBox, dir: Vec2) -> f64 {
    let [u, v] = b.axes();
    b.half_length * u.dot(dir).abs() + b.half_width * v.dot(dir).abs()
}

/// Nearest obstacle ahead of `agent` inside its path corridor, as `(gap, speed along path)`.
fn find_leader(
    agent: &AgentState,
    spec: &AgentSpec,
    state: &WorldState,
    others: impl Iterator<Item = (OrientedBox, Vec2)>,
    p: &IdmParams,
) -> Option<(f64, f64)> {
    let ego = (state.ego_box(), state.ego.velocity());
    let mut best: Option<(f64, f64)> = None;
    for (b, vel) in core::iter::once(ego).chain(others) {
        let proj = spec.path.project(b.center.position());
        let ds = proj.arclength - agent.s;
        if ds <= 0.0 || ds > p.sensing_range || proj.distance > p.corridor + half_extent_along(&b, Vec2::from_angle(proj.segment_heading).perp()) {
            continue;
        }
        let dir = Vec2::from_angle(proj.segment_heading);
        let gap = ds - agent.footprint.half_length - half_extent_along(&b, dir);
        let lead_v = vel.dot(dir);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, lead_v));
        }
    }
    best
}

/// Control of one background agent. Scripted agents hold their speed; reactive
/// agents follow the intelligent driver model behind the nearest obstacle
/// (ego, other agents or pedestrians) in their path corridor. Steering follows
/// the path curvature.
pub fn reactive_agent_policy(
    index: usize,
    scenario: &Scenario,
    state: &WorldState,
    cfg: &WorldConfig,
) -> ControlInput {
    let agent = &state.agents[index];
    let spec = &scenario.agents[agent.spec];
    let ds = 1.0;
    let kappa = normalize_angle(spec.path.heading_at(agent.s + ds) - spec.path.heading_at(agent.s)) / ds;
    let steer = (scenario.ego.wheelbase * kappa).atan();
    let accel = match spec.behavior {
        AgentBehavior::Scripted => 0.0,
        AgentBehavior::Reactive => {
            let others = state
                .agents
                .iter()
                .enumerate()
                .filter(|(j, a)| *j != index && a.active)
                .map(|(_, a)| (a.footprint, a.footprint.center.heading() * a.speed))
                .chain(
                    state.pedestrians.iter().filter(|p| p.active).map(|p| (p.footprint, p.footprint.center.heading() * p.speed)),
                );
            let leader = find_leader(agent, spec, state, others, &cfg.idm);
            idm_accel(agent.speed, agent.desired_speed, leader, &cfg.idm)
        }
    };
    let accel = if accel.is_finite() { accel } else { cfg.limits.accel_min };
    ControlInput::new(steer, accel, &cfg.limits)
}

/// Zone membership of the ego with respect to one control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ZoneState {
    pub stop_required: bool,
    pub go_required: bool,
}

pub fn zone_state(kind: ControlKind, inside: bool, phase: Option<SignalPhase>, honored: bool) -> ZoneState {
    if !inside {
        return ZoneState::default();
    }
    let stop = match kind {
        ControlKind::RedLight => phase == Some(SignalPhase::Red),
        ControlKind::StopSign => !honored,
    };
    ZoneState { stop_required: stop, go_required: !stop }
}

fn clear_path_ahead(state: &WorldState, cfg: &WorldConfig) -> bool {
    let half = 0.5 * cfg.clear_path_length;
    let pose = state.ego.pose;
    let c = pose.position() + pose.heading() * (state.ego_half_length + half);
    let probe = OrientedBox { center: Pose2D::new(c.x, c.y, pose.yaw), half_length: half, half_width: 0.5 * cfg.clear_path_width };
    !state.obstacles().any(|(b, _)| sat_overlap(&probe, &b))
}

/// Infraction flags of the transition `prev -> next`.
pub fn detect_infractions(scenario: &Scenario, cfg: &WorldConfig, prev: &WorldState, next: &WorldState) -> InfractionFlags {
    let route = RouteWindow::full(&scenario.route);
    let m = measure_pose(&route, &scenario.lanes, &next.ego.pose, &cfg.road);
    let mut flags = InfractionFlags {
        offroad: m.offroad,
        offroute: m.offroute,
        opposite_lane: m.opposite,
        emergency_lane: m.emergency,
        ..Default::default()
    };
    let ego = next.ego_box();
    let ego_v = next.ego.velocity();
    for (b, v) in next.obstacles() {
        if sat_overlap(&ego, &b) {
            let rel = (ego_v - v).norm();
            if rel >= cfg.min_collision_speed {
                flags.collision = true;
                flags.collision_speed = rel;
                break;
            }
        }
    }
    let speed = next.ego.speed;
    let pos = next.ego.pose.position();
    for (c, status) in scenario.traffic_controls.iter().zip(&prev.controls) {
        let inside = c.trigger_zone.contains(pos);
        let phase = c.schedule.map(|s| s.phase_at(next.step_index, status.phase_offset));
        let z = zone_state(c.kind, inside, phase, status.honored);
        if z.stop_required && speed > cfg.v_stop && m.route_s >= c.stop_line_arclength {
            match c.kind {
                ControlKind::RedLight => flags.red_violation = true,
                ControlKind::StopSign => flags.stop_violation = true,
            }
        }
        if z.go_required && speed < cfg.v_go && clear_path_ahead(next, cfg) {
            flags.go_blocked_slow = true;
        }
    }
    flags
}

/// Advances the world by one step under the ego control.
pub fn step_world(scenario: &Scenario, state: &WorldState, ego_control: ControlInput, cfg: &WorldConfig) -> Result<StepOutcome> {
    if state.terminal.is_some() {
        return Err(Error::EpisodeFinished);
    }
    let dt = cfg.dt;
    let u = ControlInput::new(ego_control.steer, ego_control.accel, &cfg.limits);
    let mut next = state.clone();
    next.ego = bicycle_step(&state.ego, &u, dt);
    next.step_index = state.step_index + 1;

    for i in 0..state.agents.len() {
        if !state.agents[i].active {
            continue;
        }
        let ctrl = reactive_agent_policy(i, scenario, state, cfg);
        let a = &mut next.agents[i];
        let spec = &scenario.agents[a.spec];
        let s = a.s + a.speed * dt;
        a.speed = (a.speed + ctrl.accel * dt).max(0.0);
        a.s = s;
        a.last_accel = ctrl.accel;
        a.last_steer = ctrl.steer;
        a.on_connector = in_span(spec.connector, s);
        if s >= spec.path.length() {
            a.active = false;
        } else {
            a.footprint = a.footprint.moved_to(agent_pose(spec, s));
        }
    }
    for p in next.pedestrians.iter_mut() {
        let spec = &scenario.pedestrians[p.spec];
        if p.active {
            p.s += p.speed * dt;
            if p.s >= spec.crossing.length() {
                p.active = false;
                p.finished = true;
            } else {
                p.footprint = pedestrian_box(spec, p.s);
            }
        } else if !p.finished && next.step_index >= p.spawn_step {
            p.active = true;
        }
    }
    for (c, status) in scenario.traffic_controls.iter().zip(next.controls.iter_mut()) {
        status.phase = c.schedule.map(|s| s.phase_at(next.step_index, status.phase_offset));
    }

    let flags = detect_infractions(scenario, cfg, state, &next);
    let route = RouteWindow::full(&scenario.route);
    let road = measure_pose(&route, &scenario.lanes, &next.ego.pose, &cfg.road);
    next.route_progress = state.route_progress.max(road.route_s);
    next.offroute_streak = if flags.offroute { state.offroute_streak + 1 } else { 0 };

    // a stop sign is honored once the ego comes to rest inside its zone before the line
    let pos = next.ego.pose.position();
    for (c, status) in scenario.traffic_controls.iter().zip(next.controls.iter_mut()) {
        if c.kind == ControlKind::StopSign
            && !status.honored
            && c.trigger_zone.contains(pos)
            && next.ego.speed <= cfg.v_stop
            && road.route_s < c.stop_line_arclength
        {
            status.honored = true;
        }
    }

    let reason = if flags.collision {
        Some(TerminalReason::Collision)
    } else if next.route_progress >= scenario.route.length() - cfg.goal_tolerance {
        Some(TerminalReason::RouteComplete)
    } else if next.offroute_streak >= cfg.offroute_patience {
        Some(TerminalReason::OffrouteExceeded)
    } else if next.step_index >= scenario.max_steps {
        Some(TerminalReason::Timeout)
    } else {
        None
    };
    next.terminal = reason;
    Ok(StepOutcome { next_state: next, flags, terminal: reason.is_some(), terminal_reason: reason, road })
}

/// Freezes everything the counterfactual engine needs from the current state.
pub fn snapshot_for_counterfactual(scenario: &Scenario, state: &WorldState, cfg: &WorldConfig) -> Result<CounterfactualSnapshot> {
    if state.terminal.is_some() {
        return Err(Error::EpisodeFinished);
    }
    let center = state.ego.pose.position();
    let r = cfg.sensing_radius;
    let mut agents = Vec::new();
    for a in state.agents.iter().filter(|a| a.active) {
        if a.footprint.center.position().distance(center) <= r {
            agents.push(DecayAgentState {
                footprint: a.footprint,
                speed: a.speed,
                held_accel: a.last_accel,
                held_steer: a.last_steer,
                on_connector: a.on_connector,
                step_index: 0,
            });
        }
    }
    for p in state.pedestrians.iter().filter(|p| p.active) {
        if p.footprint.center.position().distance(center) <= r {
            agents.push(DecayAgentState {
                footprint: p.footprint,
                speed: p.speed,
                held_accel: 0.0,
                held_steer: 0.0,
                on_connector: false,
                step_index: 0,
            });
        }
    }
    let route_window =
        RouteWindow::of(&scenario.route, state.route_progress, state.route_progress + cfg.route_window_length)?;
    let lanes = nearby_lanes(&scenario.lanes, center, r);
    let zones = scenario
        .traffic_controls
        .iter()
        .zip(&state.controls)
        .map(|(c, s)| ZoneSnapshot {
            kind: c.kind,
            trigger_zone: c.trigger_zone,
            stop_line_arclength: c.stop_line_arclength,
            schedule: c.schedule,
            phase_offset: s.phase_offset,
            honored: s.honored,
        })
        .collect();
    Ok(CounterfactualSnapshot {
        version: SNAPSHOT_VERSION,
        scenario: scenario.name.clone(),
        step_index: state.step_index,
        ego: state.ego,
        ego_half_length: state.ego_half_length,
        ego_half_width: state.ego_half_width,
        agents,
        route_window,
        lanes,
        zones,
        v_stop: cfg.v_stop,
    })
}

/// Minimum gap between the ego and any active obstacle, capped at `cap`.
pub fn ego_clearance(state: &WorldState, cap: f64) -> f64 {
    let ego = state.ego_box();
    state.obstacles().map(|(b, _)| box_gap(&ego, &b)).fold(cap, f64::min)
}
