//! Dense counterfactual step reward and sparse corrective reward.

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::road::RoadMeasure;
use crate::world::InfractionFlags;
use crate::{Error, Result};

/// Constants of the dense counterfactual reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualRewardConfig {
    pub p_min: f64,
    pub p_max: f64,
    pub w_prog: f64,
    pub w_g: f64,
    pub w_c: f64,
    pub w_h: f64,
    pub eta_min: f64,
    pub d_clip: f64,
    pub delta_g_rec: f64,
    pub delta_c_rec: f64,
    pub k_g: f64,
    pub k_c: f64,
    pub k_h: f64,
    pub c_clip: f64,
    pub a_rec: f64,
    pub b_rec: f64,
    pub lambda_offroad: f64,
    pub lambda_opp: f64,
    pub lambda_offroute: f64,
    pub lambda_emg: f64,
    pub lambda_coll: f64,
    pub lambda_red: f64,
    pub lambda_stop: f64,
    pub alpha_v: f64,
    pub v_ref: f64,
    pub nu_min: f64,
    pub nu_max: f64,
}

impl Default for CounterfactualRewardConfig {
    fn default() -> Self {
        CounterfactualRewardConfig {
            p_min: 0.0,
            p_max: 1.2,
            w_prog: 8.0,
            w_g: 3.0,
            w_c: 0.8,
            w_h: 2.0,
            eta_min: 0.0,
            d_clip: 0.1,
            delta_g_rec: 0.08,
            delta_c_rec: 0.08,
            k_g: 0.4,
            k_c: 0.2,
            k_h: 0.4,
            c_clip: 0.5,
            a_rec: 0.5,
            b_rec: 0.5,
            lambda_offroad: 1.5,
            lambda_opp: 0.1,
            lambda_offroute: 1.5,
            lambda_emg: 1.0,
            lambda_coll: 40.0,
            lambda_red: 40.0,
            lambda_stop: 40.0,
            alpha_v: 0.5,
            v_ref: 5.0,
            nu_min: 0.0,
            nu_max: 1.0,
        }
    }
}

impl CounterfactualRewardConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_offroad,
            self.lambda_opp,
            self.lambda_offroute,
            self.lambda_emg,
            self.lambda_coll,
            self.lambda_red,
            self.lambda_stop,
        ];
        if !(self.p_max > self.p_min) {
            return Err(Error::InvalidConfig("reward.cp: p_max must exceed p_min".into()));
        }
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("reward.cp: penalty weights must be non-negative".into()));
        }
        if !(self.nu_min <= self.nu_max) || !(self.v_ref > 0.0) {
            return Err(Error::InvalidConfig("reward.cp: need nu_min <= nu_max and v_ref > 0".into()));
        }
        Ok(())
    }
}

/// Constants of the sparse corrective reward and the zone speed thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectiveRewardConfig {
    pub lambda_offroad: f64,
    pub lambda_emg: f64,
    pub lambda_offroute: f64,
    pub lambda_red: f64,
    pub lambda_stop: f64,
    pub lambda_coll: f64,
    pub v_stop: f64,
    pub v_go: f64,
}

impl Default for CorrectiveRewardConfig {
    fn default() -> Self {
        CorrectiveRewardConfig {
            lambda_offroad: 0.5,
            lambda_emg: 0.2,
            lambda_offroute: 0.5,
            lambda_red: 2.0,
            lambda_stop: 2.0,
            lambda_coll: 5.0,
            v_stop: 0.1,
            v_go: 2.0,
        }
    }
}

impl CorrectiveRewardConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas =
            [self.lambda_offroad, self.lambda_emg, self.lambda_offroute, self.lambda_red, self.lambda_stop, self.lambda_coll];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("reward.gr: penalty weights must be non-negative".into()));
        }
        if !(self.v_stop < self.v_go) {
            return Err(Error::InvalidConfig("reward.gr: v_stop must be below v_go".into()));
        }
        Ok(())
    }
}

/// Route, lane-center and heading deviations with their per-step changes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviationSample {
    pub d_g: f64,
    pub d_c: f64,
    pub d_h: f64,
    pub delta_d_g: f64,
    pub delta_d_c: f64,
    pub delta_d_h: f64,
}

impl DeviationSample {
    /// Sample at `(d_g, d_c, d_h)` given the previous step's magnitudes.
    pub fn between(prev: (f64, f64, f64), now: (f64, f64, f64)) -> Self {
        DeviationSample {
            d_g: now.0,
            d_c: now.1,
            d_h: now.2,
            delta_d_g: now.0 - prev.0,
            delta_d_c: now.1 - prev.1,
            delta_d_h: now.2 - prev.2,
        }
    }
}

/// Normalized progress Δp̂ = clip(Δp, p_min, p_max) / p_max.
pub fn progress_term(delta_p: f64, cfg: &CounterfactualRewardConfig) -> f64 {
    delta_p.clamp(cfg.p_min, cfg.p_max) / cfg.p_max
}

pub fn efficiency_multiplier(d: &DeviationSample, cfg: &CounterfactualRewardConfig) -> f64 {
    let e = (-cfg.w_g * d.d_g).exp() * (-cfg.w_c * d.d_c).exp() * (-cfg.w_h * d.d_h).exp();
    e.max(cfg.eta_min)
}

/// Signed reward for shrinking deviations that are already above their gates.
/// The heading gate deliberately reuses the lane-center threshold.
pub fn recovery_reward(d: &DeviationSample, progress_hat: f64, cfg: &CounterfactualRewardConfig) -> f64 {
    let clip = |x: f64| x.clamp(-cfg.d_clip, cfg.d_clip);
    let gated = |dev: f64, threshold: f64, k: f64, delta: f64| if dev > threshold { -k * clip(delta) } else { 0.0 };
    let c = gated(d.d_g, cfg.delta_g_rec, cfg.k_g, d.delta_d_g)
        + gated(d.d_c, cfg.delta_c_rec, cfg.k_c, d.delta_d_c)
        + gated(d.d_h, cfg.delta_c_rec, cfg.k_h, d.delta_d_h);
    c.clamp(-cfg.c_clip, cfg.c_clip) * (cfg.a_rec + cfg.b_rec * progress_hat)
}

pub fn collision_multiplier(v: f64, cfg: &CounterfactualRewardConfig) -> f64 {
    1.0 + cfg.alpha_v * (v / cfg.v_ref).clamp(cfg.nu_min, cfg.nu_max)
}

/// Dense per-step counterfactual reward. The collision term is charged only
/// when `first_collision` is set.
pub fn counterfactual_step_reward(
    progress_hat: f64,
    eta: f64,
    r_rec: f64,
    flags: &InfractionFlags,
    first_collision: bool,
    v: f64,
    cfg: &CounterfactualRewardConfig,
) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let mut r = cfg.w_prog * progress_hat * eta + r_rec;
    r -= cfg.lambda_offroad * ind(flags.offroad);
    r -= cfg.lambda_opp * ind(flags.opposite_lane);
    r -= cfg.lambda_offroute * ind(flags.offroute);
    r -= cfg.lambda_emg * ind(flags.emergency_lane);
    if flags.collision && first_collision {
        r -= cfg.lambda_coll * collision_multiplier(v, cfg);
    }
    r
}

/// Dense reward of one transition between two road measurements. Callers pass
/// `first_collision` so that only the first contact is charged.
pub fn dense_step_reward(
    before: &RoadMeasure,
    after: &RoadMeasure,
    flags: &InfractionFlags,
    first_collision: bool,
    speed: f64,
    cfg: &CounterfactualRewardConfig,
) -> f64 {
    let dev = DeviationSample::between(
        (before.d_route(), before.lane_offset, before.d_heading()),
        (after.d_route(), after.lane_offset, after.d_heading()),
    );
    let p_hat = progress_term(after.route_s - before.route_s, cfg);
    let eta = efficiency_multiplier(&dev, cfg);
    let r_rec = recovery_reward(&dev, p_hat, cfg);
    counterfactual_step_reward(p_hat, eta, r_rec, flags, first_collision, speed, cfg)
}

/// Closed-loop instance of the dense reward: red and stop penalties are
/// charged on the step a violation starts instead of once per trajectory.
pub fn closed_loop_step_reward(
    before: &RoadMeasure,
    after: &RoadMeasure,
    flags: &InfractionFlags,
    prev_flags: &InfractionFlags,
    speed: f64,
    cfg: &CounterfactualRewardConfig,
) -> f64 {
    let mut r = dense_step_reward(before, after, flags, flags.collision, speed, cfg);
    if flags.red_violation && !prev_flags.red_violation {
        r -= cfg.lambda_red;
    }
    if flags.stop_violation && !prev_flags.stop_violation {
        r -= cfg.lambda_stop;
    }
    r
}

/// Sparse, non-positive corrective reward for one executed world step.
/// Slow motion in a go-required zone is charged under the stop term.
pub fn corrective_reward(flags: &InfractionFlags, cfg: &CorrectiveRewardConfig) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    0.0 - (cfg.lambda_offroad * ind(flags.offroad)
        + cfg.lambda_emg * ind(flags.emergency_lane)
        + cfg.lambda_offroute * ind(flags.offroute)
        + cfg.lambda_red * ind(flags.red_violation)
        + cfg.lambda_stop * ind(flags.stop_violation || flags.go_blocked_slow)
        + cfg.lambda_coll * ind(flags.collision))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CounterfactualRewardConfig {
        CounterfactualRewardConfig::default()
    }

    #[test]
    fn progress_examples() {
        assert_eq!(progress_term(0.0, &cfg()), 0.0);
        assert_eq!(progress_term(1.5, &cfg()), 1.0);
        assert_eq!(progress_term(0.6, &cfg()), 0.5);
        assert_eq!(progress_term(-0.3, &cfg()), 0.0);
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(efficiency_multiplier(&DeviationSample::default(), &cfg()), 1.0);
        let d = DeviationSample { d_g: 1.0, ..Default::default() };
        assert!((efficiency_multiplier(&d, &cfg()) - (-3.0f64).exp()).abs() < 1e-15);
        let huge = DeviationSample { d_g: 1e3, d_c: 1e3, d_h: 1e3, ..Default::default() };
        assert_eq!(efficiency_multiplier(&huge, &cfg()), 0.0);
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_reward(&DeviationSample::default(), 1.0, &cfg()), 0.0);
        let improving = DeviationSample { d_g: 0.2, delta_d_g: -0.1, ..Default::default() };
        assert!((recovery_reward(&improving, 1.0, &cfg()) - 0.04).abs() < 1e-15);
        let growing = DeviationSample { d_g: 0.2, delta_d_g: 0.1, ..Default::default() };
        assert!((recovery_reward(&growing, 0.0, &cfg()) + 0.02).abs() < 1e-15);
        // heading gate uses the lane-center threshold
        let heading = DeviationSample { d_h: 0.09, delta_d_h: -0.05, ..Default::default() };
        assert!((recovery_reward(&heading, 0.0, &cfg()) - 0.4 * 0.05 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn collision_multiplier_examples() {
        assert_eq!(collision_multiplier(0.0, &cfg()), 1.0);
        assert_eq!(collision_multiplier(5.0, &cfg()), 1.5);
        assert_eq!(collision_multiplier(100.0, &cfg()), 1.5);
    }

    #[test]
    fn step_reward_examples() {
        let none = InfractionFlags::default();
        assert_eq!(counterfactual_step_reward(1.0, 1.0, 0.0, &none, false, 0.0, &cfg()), 8.0);
        let coll = InfractionFlags { collision: true, collision_speed: 5.0, ..Default::default() };
        assert_eq!(counterfactual_step_reward(0.0, 1.0, 0.0, &coll, true, 5.0, &cfg()), -60.0);
        assert_eq!(counterfactual_step_reward(0.0, 1.0, 0.0, &coll, false, 5.0, &cfg()), 0.0);
        let off = InfractionFlags { offroad: true, ..Default::default() };
        assert_eq!(counterfactual_step_reward(0.0, 1.0, 0.0, &off, false, 0.0, &cfg()), -1.5);
    }

    #[test]
    fn corrective_examples() {
        let c = CorrectiveRewardConfig::default();
        assert_eq!(corrective_reward(&InfractionFlags::default(), &c), 0.0);
        let coll = InfractionFlags { collision: true, collision_speed: 3.0, ..Default::default() };
        assert_eq!(corrective_reward(&coll, &c), -5.0);
        let red = InfractionFlags { red_violation: true, ..Default::default() };
        assert_eq!(corrective_reward(&red, &c), -2.0);
        // opposite lane has no corrective term
        let opp = InfractionFlags { opposite_lane: true, ..Default::default() };
        assert_eq!(corrective_reward(&opp, &c), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = CounterfactualRewardConfig { p_max: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = CorrectiveRewardConfig { v_stop: 3.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
