//! Trajectory vocabulary, per-candidate features, the masked linear-softmax
//! scorer, the rule-based expert and behavior cloning.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{CandidateSet, CounterfactualSnapshot};
use crate::dynamics::Waypoint;
use crate::geometry::{box_gap, normalize_angle, OrientedBox, Pose2D, Vec2};
use crate::road::measure_pose;
use crate::world::zone_state;
use crate::{Error, Result};

/// Number of per-candidate features.
pub const FEATURE_DIM: usize = 7;

/// Feature indices, in row order.
pub mod feature {
    pub const PROGRESS: usize = 0;
    pub const CLEARANCE: usize = 1;
    pub const MEAN_LATERAL: usize = 2;
    pub const HEADING_ERROR: usize = 3;
    pub const MEAN_SPEED: usize = 4;
    pub const STOP_COMPLIANCE: usize = 5;
    pub const BIAS: usize = 6;
}

pub type FeatureRow = [f64; FEATURE_DIM];

/// Parametric trajectory vocabulary: lateral end offsets × target speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub lateral_offsets: Vec<f64>,
    pub target_speeds: Vec<f64>,
    /// Points per trajectory.
    pub points: usize,
    pub dt: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    /// Travel distance over which a full lateral offset is reached.
    pub lane_change_distance: f64,
    /// Upper cap of the clearance feature.
    pub clearance_cap: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            lateral_offsets: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            target_speeds: vec![0.0, 2.0, 5.0, 8.0, 11.0],
            points: 20,
            dt: 0.1,
            max_accel: 3.0,
            max_decel: 4.0,
            lane_change_distance: 12.0,
            clearance_cap: 10.0,
        }
    }
}

impl VocabConfig {
    pub fn size(&self) -> usize {
        self.lateral_offsets.len() * self.target_speeds.len()
    }

    /// `(offset index, speed index)` of mode `k`. Modes are offset-major.
    pub fn mode(&self, k: usize) -> (usize, usize) {
        (k / self.target_speeds.len(), k % self.target_speeds.len())
    }

    pub fn mode_index(&self, offset: usize, speed: usize) -> usize {
        offset * self.target_speeds.len() + speed
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() < 2 || self.points == 0 || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("vocab: need at least two modes, points > 0 and dt > 0".into()));
        }
        if !(self.max_accel > 0.0 && self.max_decel > 0.0 && self.lane_change_distance > 0.0) {
            return Err(Error::InvalidConfig("vocab: accel, decel and lane change distance must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of every field, used to tie checkpoints to a vocabulary.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bits: u64| {
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.lateral_offsets.len() as u64);
        self.lateral_offsets.iter().for_each(|v| eat(v.to_bits()));
        eat(self.target_speeds.len() as u64);
        self.target_speeds.iter().for_each(|v| eat(v.to_bits()));
        eat(self.points as u64);
        for v in [self.dt, self.max_accel, self.max_decel, self.lane_change_distance, self.clearance_cap] {
            eat(v.to_bits());
        }
        h
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Builds the vocabulary around the route from the snapshot's ego state.
/// Modes whose endpoint leaves the mapped lanes are masked invalid.
pub fn generate_candidates(snapshot: &CounterfactualSnapshot, vocab: &VocabConfig) -> CandidateSet {
    let ego = &snapshot.ego;
    let route = &snapshot.route_window;
    let proj = route.line.project(ego.pose.position());
    let s0 = proj.arclength;
    let d0 = proj.lateral_offset;
    let n = vocab.points;
    let mut trajectories = Vec::with_capacity(vocab.size());
    let mut valid_mask = Vec::with_capacity(vocab.size());
    let road = crate::road::RoadParams { offroad_margin: 0.0, ..Default::default() };
    for &offset in &vocab.lateral_offsets {
        for &target in &vocab.target_speeds {
            // accel-limited speed ramp toward the target
            let mut speeds = Vec::with_capacity(n);
            let mut dist = Vec::with_capacity(n);
            let (mut v, mut s) = (ego.speed, 0.0);
            for _ in 0..n {
                let dv = (target - v).clamp(-vocab.max_decel * vocab.dt, vocab.max_accel * vocab.dt);
                let v_next = (v + dv).max(0.0);
                s += 0.5 * (v + v_next) * vocab.dt;
                v = v_next;
                speeds.push(v);
                dist.push(s);
            }
            let total = s;
            let traj: Vec<Waypoint> = if total <= 0.0 {
                speeds.iter().map(|v| Waypoint { x: 0.0, y: 0.0, speed: *v }).collect()
            } else {
                let reach = (total / vocab.lane_change_distance).min(1.0);
                let d_end = d0 + (offset - d0) * reach;
                dist.iter()
                    .zip(&speeds)
                    .map(|(sk, vk)| {
                        let lat = d0 + (d_end - d0) * smoothstep(sk / total);
                        let base = route.line.point_at(s0 + sk);
                        let normal = Vec2::from_angle(route.line.heading_at(s0 + sk)).perp();
                        let local = ego.pose.to_local(base + normal * lat);
                        Waypoint { x: local.x, y: local.y, speed: *vk }
                    })
                    .collect()
            };
            let end = traj.last().map_or(Vec2::ZERO, |w| w.position());
            let end_global = ego.pose.to_global(end);
            let m = measure_pose(route, &snapshot.lanes, &Pose2D::new(end_global.x, end_global.y, ego.pose.yaw), &road);
            valid_mask.push(!m.offroad);
            trajectories.push(traj);
        }
    }
    if !valid_mask.iter().any(|v| *v) {
        // keep the route-following modes available even off the map
        let zero = vocab
            .lateral_offsets
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map_or(0, |(i, _)| i);
        for j in 0..vocab.target_speeds.len() {
            valid_mask[vocab.mode_index(zero, j)] = true;
        }
    }
    let logits = vec![0.0; trajectories.len()];
    CandidateSet { trajectories, logits, valid_mask }
}

/// Global poses along a candidate, with headings from consecutive points.
fn candidate_poses(snapshot: &CounterfactualSnapshot, traj: &[Waypoint]) -> Vec<Pose2D> {
    let ego = &snapshot.ego.pose;
    let mut prev = ego.position();
    let mut yaw = ego.yaw;
    traj.iter()
        .map(|w| {
            let p = ego.to_global(w.position());
            let d = p - prev;
            if d.norm() > 1e-6 {
                yaw = d.angle();
            }
            prev = p;
            Pose2D::new(p.x, p.y, yaw)
        })
        .collect()
}

/// Per-candidate feature rows. Invalid candidates still get finite features.
pub fn candidate_features(snapshot: &CounterfactualSnapshot, candidates: &CandidateSet, vocab: &VocabConfig) -> Vec<FeatureRow> {
    let route = &snapshot.route_window;
    let road = crate::road::RoadParams::default();
    let s_ego = measure_pose(route, &snapshot.lanes, &snapshot.ego.pose, &road).route_s;
    candidates
        .trajectories
        .iter()
        .map(|traj| {
            let poses = candidate_poses(snapshot, traj);
            let mut clearance = vocab.clearance_cap;
            let mut mean_lat = 0.0;
            let mut route_s = Vec::with_capacity(poses.len());
            for (k, pose) in poses.iter().enumerate() {
                let t = (k + 1) as f64 * vocab.dt;
                let ego_box = snapshot.ego_box_at(&crate::dynamics::BicycleState { pose: *pose, ..snapshot.ego });
                for a in &snapshot.agents {
                    let c = a.footprint.center;
                    let p = c.position() + c.heading() * (a.speed * t);
                    let moved: OrientedBox = a.footprint.moved_to(Pose2D::new(p.x, p.y, c.yaw));
                    clearance = clearance.min(box_gap(&ego_box, &moved));
                }
                let pr = route.line.project(pose.position());
                mean_lat += pr.lateral_offset.abs();
                route_s.push(route.offset + pr.arclength);
            }
            let n = poses.len().max(1) as f64;
            let last = poses.last().copied().unwrap_or(snapshot.ego.pose);
            let end = route.line.project(last.position());
            let heading_err = normalize_angle(last.yaw - end.segment_heading).abs();
            let mean_speed = traj.iter().map(|w| w.speed).sum::<f64>() / n;
            let progress = route_s.last().copied().unwrap_or(s_ego) - s_ego;
            let compliance = stop_compliance(snapshot, traj, &poses, &route_s, s_ego);
            [progress, clearance, mean_lat / n, heading_err, mean_speed, compliance, 1.0]
        })
        .collect()
}

/// 1 unless the candidate crosses a stop line while the zone would require a stop.
fn stop_compliance(snapshot: &CounterfactualSnapshot, traj: &[Waypoint], poses: &[Pose2D], route_s: &[f64], s_ego: f64) -> f64 {
    for z in &snapshot.zones {
        let mut honored = z.honored;
        let mut prev_s = s_ego;
        for (k, (pose, s)) in poses.iter().zip(route_s).enumerate() {
            let inside = z.trigger_zone.contains(pose.position());
            let step = snapshot.step_index + k as u32 + 1;
            let phase = z.schedule.map(|sch| sch.phase_at(step, z.phase_offset));
            let line = z.stop_line_arclength;
            if prev_s < line && *s >= line && zone_state(z.kind, inside, phase, honored).stop_required && traj[k].speed > snapshot.v_stop {
                return 0.0;
            }
            if inside && traj[k].speed <= snapshot.v_stop && *s < line {
                honored = true;
            }
            prev_s = *s;
        }
    }
    1.0
}

/// Online scorer weights with an update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        PolicyParams { weights: vec![0.0; FEATURE_DIM], version: 0 }
    }

    pub fn logits(&self, features: &[FeatureRow]) -> Vec<f64> {
        features.iter().map(|f| f.iter().zip(&self.weights).map(|(a, b)| a * b).sum()).collect()
    }
}

/// EMA teacher weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub weights: Vec<f64>,
}

impl TeacherParams {
    pub fn from_online(p: &PolicyParams) -> Self {
        TeacherParams { weights: p.weights.clone() }
    }

    pub fn as_policy(&self) -> PolicyParams {
        PolicyParams { weights: self.weights.clone(), version: 0 }
    }
}

/// θ_T ← m·θ_T + (1−m)·θ.
pub fn ema_update(teacher: &TeacherParams, online: &PolicyParams, m: f64) -> TeacherParams {
    TeacherParams {
        weights: teacher.weights.iter().zip(&online.weights).map(|(t, o)| m * t + (1.0 - m) * o).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    pub probabilities: Vec<f64>,
    pub log_probabilities: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl PolicyDistribution {
    /// Probability-weighted mean feature row.
    pub fn mean_features(&self, features: &[FeatureRow]) -> FeatureRow {
        let mut m = [0.0; FEATURE_DIM];
        for (p, f) in self.probabilities.iter().zip(features) {
            if *p > 0.0 {
                for d in 0..FEATURE_DIM {
                    m[d] += p * f[d];
                }
            }
        }
        m
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (i, (p, v)) in self.probabilities.iter().zip(&self.valid_mask).enumerate() {
            if *v && *p > best_p {
                best = i;
                best_p = *p;
            }
        }
        best
    }
}

/// Masked, max-shifted softmax over `logits / temperature`.
pub fn softmax_masked(logits: &[f64], valid_mask: &[bool], temperature: f64) -> Result<PolicyDistribution> {
    if logits.len() != valid_mask.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} logits vs {} mask entries", logits.len(), valid_mask.len())));
    }
    let max = logits
        .iter()
        .zip(valid_mask)
        .filter(|(_, v)| **v)
        .map(|(l, _)| *l / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyCandidateGroup);
    }
    let z: f64 = logits.iter().zip(valid_mask).filter(|(_, v)| **v).map(|(l, _)| (l / temperature - max).exp()).sum();
    let log_z = z.ln();
    let mut probabilities = vec![0.0; logits.len()];
    let mut log_probabilities = vec![f64::NEG_INFINITY; logits.len()];
    for i in 0..logits.len() {
        if valid_mask[i] {
            let lp = logits[i] / temperature - max - log_z;
            log_probabilities[i] = lp;
            probabilities[i] = lp.exp();
        }
    }
    Ok(PolicyDistribution { probabilities, log_probabilities, valid_mask: valid_mask.to_vec() })
}

pub fn policy_distribution(params: &PolicyParams, features: &[FeatureRow], valid_mask: &[bool], temperature: f64) -> Result<PolicyDistribution> {
    if params.weights.len() != FEATURE_DIM {
        return Err(Error::ShapeMismatch(alloc::format!("{} weights, expected {FEATURE_DIM}", params.weights.len())));
    }
    softmax_masked(&params.logits(features), valid_mask, temperature)
}

/// Inverse-CDF draw over the valid candidates.
pub fn sample_candidate<R: Rng>(dist: &PolicyDistribution, rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in dist.probabilities.iter().enumerate() {
        if !dist.valid_mask[i] || *p <= 0.0 {
            continue;
        }
        last = i;
        acc += p;
        if u < acc {
            return (i, dist.log_probabilities[i]);
        }
    }
    (last, dist.log_probabilities[last])
}

/// ∇_w log π(index) = f_index − Σ_g p_g f_g.
pub fn logprob_grad(params: &PolicyParams, features: &[FeatureRow], valid_mask: &[bool], index: usize) -> Result<FeatureRow> {
    let dist = policy_distribution(params, features, valid_mask, 1.0)?;
    Ok(logprob_grad_from(&dist, features, index))
}

pub fn logprob_grad_from(dist: &PolicyDistribution, features: &[FeatureRow], index: usize) -> FeatureRow {
    let mean = dist.mean_features(features);
    let mut g = [0.0; FEATURE_DIM];
    for d in 0..FEATURE_DIM {
        g[d] = features[index][d] - mean[d];
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    pub safe_clearance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { cruise_speed: 8.0, safe_clearance: 2.0 }
    }
}

/// Rule-based expert: follow the route at the highest target speed up to
/// cruise whose preview keeps a safe clearance and obeys stop zones; otherwise
/// brake to a stop.
pub fn expert_choice(candidates: &CandidateSet, features: &[FeatureRow], vocab: &VocabConfig, cfg: &ExpertConfig) -> usize {
    let center = vocab
        .lateral_offsets
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    let mut by_speed: Vec<usize> = (0..vocab.target_speeds.len()).collect();
    by_speed.sort_by(|a, b| vocab.target_speeds[*b].total_cmp(&vocab.target_speeds[*a]));
    let mut slowest = None;
    for j in by_speed {
        let k = vocab.mode_index(center, j);
        if !candidates.valid_mask[k] {
            continue;
        }
        slowest = Some(k);
        if vocab.target_speeds[j] > cfg.cruise_speed {
            continue;
        }
        let f = &features[k];
        if f[feature::CLEARANCE] >= cfg.safe_clearance && f[feature::STOP_COMPLIANCE] > 0.5 {
            return k;
        }
    }
    slowest.unwrap_or_else(|| candidates.valid_mask.iter().position(|v| *v).unwrap_or(0))
}

/// One behavior-cloning example: the candidate features, the mask and the expert's pick.
#[derive(Debug, Clone, PartialEq)]
pub struct BcSample {
    pub features: Vec<FeatureRow>,
    pub valid_mask: Vec<bool>,
    pub target: usize,
}

/// Mean negative log-likelihood plus `l2/2·|w|²` and its gradient.
pub fn bc_objective(weights: &[f64], samples: &[BcSample], l2: f64) -> Result<(f64, FeatureRow)> {
    let params = PolicyParams { weights: weights.to_vec(), version: 0 };
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    for s in samples {
        let dist = policy_distribution(&params, &s.features, &s.valid_mask, 1.0)?;
        loss -= dist.log_probabilities[s.target];
        let g = logprob_grad_from(&dist, &s.features, s.target);
        for d in 0..FEATURE_DIM {
            grad[d] -= g[d];
        }
    }
    let n = samples.len().max(1) as f64;
    loss /= n;
    for d in 0..FEATURE_DIM {
        grad[d] = grad[d] / n + l2 * weights[d];
        loss += 0.5 * l2 * weights[d] * weights[d];
    }
    Ok((loss, grad))
}

/// Fits the scorer to expert picks by damped Newton steps on the regularized
/// cross-entropy. Returns the weights with version 0.
pub fn fit_behavior_cloning(samples: &[BcSample], l2: f64, iterations: usize) -> Result<PolicyParams> {
    let mut w = vec![0.0; FEATURE_DIM];
    if samples.is_empty() {
        return Ok(PolicyParams { weights: w, version: 0 });
    }
    let n = samples.len() as f64;
    let (mut loss, mut grad) = bc_objective(&w, samples, l2)?;
    for _ in 0..iterations {
        let params = PolicyParams { weights: w.clone(), version: 0 };
        let mut h = DMatrix::<f64>::identity(FEATURE_DIM, FEATURE_DIM) * l2.max(1e-9);
        for s in samples {
            let dist = policy_distribution(&params, &s.features, &s.valid_mask, 1.0)?;
            let mean = dist.mean_features(&s.features);
            for (p, f) in dist.probabilities.iter().zip(&s.features) {
                if *p <= 0.0 {
                    continue;
                }
                for a in 0..FEATURE_DIM {
                    for b in 0..FEATURE_DIM {
                        h[(a, b)] += p * (f[a] - mean[a]) * (f[b] - mean[b]) / n;
                    }
                }
            }
        }
        let g = DVector::from_column_slice(&grad);
        let step = h.lu().solve(&g).ok_or(Error::Singular)?;
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(wi, si)| wi - t * si).collect();
            let (l, gr) = bc_objective(&cand, samples, l2)?;
            if l.is_finite() && l <= loss - 1e-4 * t * g.dot(&step) {
                w = cand;
                loss = l;
                grad = gr;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved || grad.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-10 {
            break;
        }
    }
    Ok(PolicyParams { weights: w, version: 0 })
}
