//! Kinematic bicycle integration, PID trajectory tracking and the decaying
//! background-agent model used inside the counterfactual world.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedBox, Polyline, Pose2D, Vec2};
use crate::{Error, Result};

/// Actuation envelope shared by the ego and every simulated vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlLimits {
    pub steer_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        ControlLimits { steer_max: 0.5, accel_min: -6.0, accel_max: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub steer: f64,
    pub accel: f64,
}

impl ControlInput {
    /// Saturates both channels to `limits`.
    pub fn new(steer: f64, accel: f64, limits: &ControlLimits) -> Self {
        ControlInput {
            steer: steer.clamp(-limits.steer_max, limits.steer_max),
            accel: accel.clamp(limits.accel_min, limits.accel_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleState {
    pub pose: Pose2D,
    pub speed: f64,
    pub wheelbase: f64,
}

impl BicycleState {
    pub fn new(pose: Pose2D, speed: f64, wheelbase: f64) -> Self {
        BicycleState { pose, speed: speed.max(0.0), wheelbase }
    }

    pub fn velocity(&self) -> Vec2 {
        self.pose.heading() * self.speed
    }
}

/// One explicit-Euler step of the rear-axle kinematic bicycle. Speed saturates at zero.
pub fn bicycle_step(state: &BicycleState, u: &ControlInput, dt: f64) -> BicycleState {
    let v = state.speed;
    if v == 0.0 && u.accel <= 0.0 {
        return *state;
    }
    let (s, c) = state.pose.yaw.sin_cos();
    let yaw = state.pose.yaw + v / state.wheelbase * u.steer.tan() * dt;
    BicycleState {
        pose: Pose2D::new(state.pose.x + v * c * dt, state.pose.y + v * s * dt, yaw),
        speed: (v + u.accel * dt).max(0.0),
        wheelbase: state.wheelbase,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub lat_kp: f64,
    pub lat_ki: f64,
    pub lat_kd: f64,
    pub lon_kp: f64,
    pub lon_ki: f64,
    pub lon_kd: f64,
    pub lookahead: f64,
    /// Seconds ahead along the reference at which the target speed is read.
    /// With `lon_kp = 1 / speed_preview` a constant-acceleration profile is
    /// tracked without lag.
    pub speed_preview: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            lat_kp: 0.8,
            lat_ki: 0.0,
            lat_kd: 0.3,
            lon_kp: 1.0,
            lon_ki: 0.05,
            lon_kd: 0.0,
            lookahead: 2.0,
            speed_preview: 1.0,
        }
    }
}

/// Minimum distance ahead at which the target speed is read, so a standing
/// vehicle sees the start of an acceleration profile.
const MIN_SPEED_PREVIEW: f64 = 0.5;

/// Integrator and previous-error carry for both PID loops.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidMemory {
    pub lat_integral: f64,
    pub lat_prev: Option<f64>,
    pub lon_integral: f64,
    pub lon_prev: Option<f64>,
}

/// Trajectory point in either frame: position plus target speed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

impl Waypoint {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Target speeds at or below this value engage the standstill hold.
const STANDSTILL_TARGET: f64 = 0.1;

/// Reference path for the tracker. A reference whose points collapse onto a
/// single location is a stop-in-place command.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackReference {
    line: Option<Polyline>,
    speeds: Vec<f64>,
}

impl TrackReference {
    pub fn new(waypoints: &[Waypoint]) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::DegenerateCandidate);
        }
        let mut pts: Vec<Vec2> = Vec::with_capacity(waypoints.len());
        let mut speeds: Vec<f64> = Vec::with_capacity(waypoints.len());
        for w in waypoints {
            let p = w.position();
            match pts.last() {
                Some(q) if q.distance(p) < crate::geometry::MIN_SEGMENT => {
                    // keep the later target speed for a repeated point
                    if let Some(last) = speeds.last_mut() {
                        *last = w.speed;
                    }
                }
                _ => {
                    pts.push(p);
                    speeds.push(w.speed);
                }
            }
        }
        let line = if pts.len() >= 2 { Some(Polyline::new(pts)?) } else { None };
        Ok(TrackReference { line, speeds })
    }

    pub fn line(&self) -> Option<&Polyline> {
        self.line.as_ref()
    }

    fn speed_at(&self, s: f64) -> f64 {
        let Some(line) = &self.line else { return 0.0 };
        let cum = line.cumulative();
        if s <= 0.0 {
            return self.speeds[0];
        }
        for i in 0..cum.len() - 1 {
            if s <= cum[i + 1] {
                let t = (s - cum[i]) / (cum[i + 1] - cum[i]);
                return self.speeds[i] + t * (self.speeds[i + 1] - self.speeds[i]);
            }
        }
        *self.speeds.last().unwrap_or(&0.0)
    }
}

/// Lateral PID on the signed cross-track error of a lookahead point, longitudinal
/// PID on speed error. Outputs are saturated to `limits`.
pub fn pid_track(
    state: &BicycleState,
    reference: &TrackReference,
    gains: &PidGains,
    memory: &PidMemory,
    limits: &ControlLimits,
    dt: f64,
) -> (ControlInput, PidMemory) {
    let Some(line) = reference.line() else {
        // stop in place: brake to standstill, wheels straight
        let accel = if state.speed > 0.0 { (-state.speed / dt).max(limits.accel_min) } else { 0.0 };
        return (ControlInput::new(0.0, accel, limits), PidMemory::default());
    };
    let pos = state.pose.position();
    let probe = pos + state.pose.heading() * gains.lookahead;
    let lat_err = line.project(probe).lateral_offset;
    let lat_d = memory.lat_prev.map_or(0.0, |prev| (lat_err - prev) / dt);
    let lat_integral = memory.lat_integral + lat_err * dt;
    let steer = -(gains.lat_kp * lat_err + gains.lat_ki * lat_integral + gains.lat_kd * lat_d);

    let s = line.project(pos).arclength;
    let target = reference.speed_at(s + (state.speed * gains.speed_preview).max(MIN_SPEED_PREVIEW));
    let lon_err = target - state.speed;
    let lon_d = memory.lon_prev.map_or(0.0, |prev| (lon_err - prev) / dt);
    let lon_integral = memory.lon_integral + lon_err * dt;
    let mut accel = gains.lon_kp * lon_err + gains.lon_ki * lon_integral + gains.lon_kd * lon_d;
    if target <= STANDSTILL_TARGET && state.speed > 0.0 {
        accel = accel.min(-state.speed / dt);
    } else if target <= STANDSTILL_TARGET && state.speed == 0.0 {
        accel = accel.min(0.0);
    }
    let memory = PidMemory {
        lat_integral,
        lat_prev: Some(lat_err),
        lon_integral,
        lon_prev: Some(lon_err),
    };
    (ControlInput::new(steer, accel, limits), memory)
}

/// Tracks global waypoints for `horizon` steps. Returns `horizon + 1` states
/// starting with `initial`.
pub fn track_trajectory(
    initial: &BicycleState,
    trajectory: &[Waypoint],
    horizon: usize,
    dt: f64,
    gains: &PidGains,
    limits: &ControlLimits,
) -> Result<Vec<BicycleState>> {
    let reference = TrackReference::new(trajectory)?;
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(*initial);
    let mut memory = PidMemory::default();
    let mut state = *initial;
    for _ in 0..horizon {
        let (u, m) = pid_track(&state, &reference, gains, &memory, limits, dt);
        memory = m;
        state = bicycle_step(&state, &u, dt);
        states.push(state);
    }
    Ok(states)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayParams {
    /// Steps during which the current controls are held unchanged.
    pub decision_window: u32,
    pub ramp_steps: u32,
    pub connector_ramp_steps: u32,
    /// Terminal braking acceleration (negative).
    pub full_brake: f64,
    pub wheelbase: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        DecayParams { decision_window: 5, ramp_steps: 10, connector_ramp_steps: 5, full_brake: -4.0, wheelbase: 2.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayAgentState {
    #[serde(rename = "box")]
    pub footprint: OrientedBox,
    pub speed: f64,
    pub held_accel: f64,
    pub held_steer: f64,
    pub on_connector: bool,
    pub step_index: u32,
}

/// Acceleration commanded by the decay model at the agent's current virtual step.
pub fn decay_accel(agent: &DecayAgentState, params: &DecayParams) -> f64 {
    if agent.step_index < params.decision_window {
        return agent.held_accel;
    }
    let ramp = if agent.on_connector { params.connector_ramp_steps } else { params.ramp_steps }.max(1);
    let into = (agent.step_index - params.decision_window + 1) as f64;
    let frac = (into / ramp as f64).min(1.0);
    let throttle = agent.held_accel.max(0.0) * (1.0 - frac);
    let brake = agent.held_accel.min(0.0).min(frac * params.full_brake);
    throttle + brake
}

/// Advances a background agent one virtual step: held controls for the decision
/// window, then throttle fades out while braking ramps in.
pub fn decay_rollout_step(agent: &DecayAgentState, dt: f64, params: &DecayParams) -> DecayAgentState {
    let accel = decay_accel(agent, params);
    let state = BicycleState { pose: agent.footprint.center, speed: agent.speed, wheelbase: params.wheelbase };
    let next = bicycle_step(&state, &ControlInput { steer: agent.held_steer, accel }, dt);
    DecayAgentState {
        footprint: agent.footprint.moved_to(next.pose),
        speed: next.speed,
        step_index: agent.step_index + 1,
        ..*agent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn straight(n: usize, speed: f64, dt: f64) -> Vec<Waypoint> {
        (0..=n).map(|k| Waypoint { x: k as f64 * speed * dt, y: 0.0, speed }).collect()
    }

    #[test]
    fn stationary_fixed_point() {
        let s = BicycleState::new(Pose2D::new(1.0, 2.0, 0.3), 0.0, 2.7);
        let u = ControlInput { steer: 0.4, accel: 0.0 };
        assert_eq!(bicycle_step(&s, &u, 0.1), s);
    }

    #[test]
    fn straight_line_advance() {
        let s = BicycleState::new(Pose2D::new(0.0, 0.0, 0.0), 10.0, 2.7);
        let n = bicycle_step(&s, &ControlInput::default(), 0.1);
        assert!((n.pose.x - 1.0).abs() < 1e-12);
        assert_eq!(n.pose.y, 0.0);
    }

    #[test]
    fn braking_saturates_at_zero() {
        let s = BicycleState::new(Pose2D::default(), 0.2, 2.7);
        let n = bicycle_step(&s, &ControlInput { steer: 0.0, accel: -6.0 }, 0.1);
        assert_eq!(n.speed, 0.0);
    }

    #[test]
    fn control_saturation() {
        let u = ControlInput::new(2.0, -20.0, &ControlLimits::default());
        assert_eq!((u.steer, u.accel), (0.5, -6.0));
    }

    #[test]
    fn on_reference_gives_zero_control() {
        let s = BicycleState::new(Pose2D::new(0.0, 0.0, 0.0), 5.0, 2.7);
        let r = TrackReference::new(&straight(20, 5.0, 0.1)).unwrap();
        let (u, _) = pid_track(&s, &r, &PidGains::default(), &PidMemory::default(), &ControlLimits::default(), 0.1);
        assert!(u.steer.abs() < 1e-12);
        assert!(u.accel.abs() < 1e-12);
    }

    #[test]
    fn left_offset_steers_right() {
        let s = BicycleState::new(Pose2D::new(0.0, 1.0, 0.0), 5.0, 2.7);
        let r = TrackReference::new(&straight(20, 5.0, 0.1)).unwrap();
        let (u, _) = pid_track(&s, &r, &PidGains::default(), &PidMemory::default(), &ControlLimits::default(), 0.1);
        assert!(u.steer < 0.0);
    }

    #[test]
    fn empty_trajectory_is_degenerate() {
        let s = BicycleState::new(Pose2D::default(), 0.0, 2.7);
        let err = track_trajectory(&s, &[], 5, 0.1, &PidGains::default(), &ControlLimits::default());
        assert_eq!(err, Err(Error::DegenerateCandidate));
    }

    #[test]
    fn hold_pose_trajectory_is_stationary() {
        let s = BicycleState::new(Pose2D::new(3.0, 4.0, 1.0), 0.0, 2.7);
        let traj = vec![Waypoint { x: 3.0, y: 4.0, speed: 0.0 }; 21];
        let states = track_trajectory(&s, &traj, 20, 0.1, &PidGains::default(), &ControlLimits::default()).unwrap();
        assert_eq!(states.len(), 21);
        assert!(states.iter().all(|x| *x == s));
    }

    #[test]
    fn decay_regimes() {
        let b = OrientedBox::new(Pose2D::default(), 2.25, 0.95).unwrap();
        let p = DecayParams::default();
        let mut a = DecayAgentState {
            footprint: b,
            speed: 8.0,
            held_accel: 1.5,
            held_steer: 0.0,
            on_connector: false,
            step_index: 0,
        };
        assert_eq!(decay_accel(&a, &p), 1.5);
        a.step_index = 100;
        assert_eq!(decay_accel(&a, &p), p.full_brake);
        let n = decay_rollout_step(&a, 0.1, &p);
        assert!(n.speed < a.speed);
    }
}
