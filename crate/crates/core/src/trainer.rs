//! Collect-then-train loop: closed-loop rollouts under a frozen behavior
//! policy, counterfactual evaluation of the stored groups, the per-method
//! optimization round and the EMA teacher. Also behavior-cloning pretraining.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{evaluate_groups, CandidateSet, CounterfactualSnapshot, EngineConfig};
use crate::dynamics::{pid_track, PidMemory, TrackReference};
use crate::objectives::{
    clipped_policy_loss, corrective_advantage, gae_advantages, kl_losses, loss_cp, loss_craft_total, loss_gr,
    reinforcepp_advantages, value_loss, CraftComponents, Decision, Grad, ObjectiveWeights, ValueHead, ValueSample,
};
use crate::optim::{adamw_step, clip_global_norm, lr_at, AdamConfig, OptimizerState};
use crate::policy::{
    candidate_features, ema_update, expert_choice, fit_behavior_cloning, generate_candidates, policy_distribution,
    sample_candidate, BcSample, ExpertConfig, FeatureRow, PolicyParams, TeacherParams, VocabConfig, FEATURE_DIM,
};
use crate::rewards::{closed_loop_step_reward, corrective_reward, CorrectiveRewardConfig, CounterfactualRewardConfig};
use crate::road::{measure_pose, RouteWindow};
use crate::world::{
    reset, snapshot_for_counterfactual, step_world, InfractionFlags, Scenario, StepOutcome, TerminalReason, WorldConfig,
    WorldState,
};
use crate::{mix_seed, seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Craft,
    Grpo,
    Ppo,
    Reinforcepp,
    /// Only the two KL anchors toward the EMA teacher.
    Distill,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Craft, Method::Grpo, Method::Ppo, Method::Reinforcepp, Method::Distill];

    pub fn name(self) -> &'static str {
        match self {
            Method::Craft => "craft",
            Method::Grpo => "grpo",
            Method::Ppo => "ppo",
            Method::Reinforcepp => "reinforcepp",
            Method::Distill => "distill",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn uses_counterfactuals(self) -> bool {
        matches!(self, Method::Craft | Method::Grpo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub total_rounds: u32,
    pub seed: u64,
    pub method: Method,
    /// World steps executed per decision.
    pub decision_interval: usize,
    pub buffer_size: usize,
    pub minibatch_size: usize,
    pub ema_momentum: f64,
    /// Sampling temperature of the behavior policy during collection.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_round: 4,
            lr_initial: 1e-4,
            lr_min: 5e-6,
            weight_decay: 1e-5,
            grad_clip_norm: 0.5,
            total_rounds: 30,
            seed: 0,
            method: Method::Craft,
            decision_interval: 5,
            buffer_size: 2048,
            minibatch_size: 64,
            ema_momentum: 0.99,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 || self.decision_interval == 0 || self.buffer_size == 0 || self.minibatch_size == 0 {
            return Err(Error::InvalidConfig("train: epochs, decision interval, buffer and minibatch sizes must be >= 1".into()));
        }
        if !(self.lr_min <= self.lr_initial && self.lr_min >= 0.0) {
            return Err(Error::InvalidConfig("train: need 0 <= lr_min <= lr_initial".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) || !(self.temperature > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidConfig("train: ema_momentum in [0, 1], temperature and grad_clip_norm > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, grad_clip_norm: self.grad_clip_norm, ..AdamConfig::default() }
    }
}

/// Every numeric setting the lab uses, grouped by module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub world: WorldConfig,
    pub vocab: VocabConfig,
    pub engine: EngineConfig,
    pub cf_reward: CounterfactualRewardConfig,
    pub corrective: CorrectiveRewardConfig,
    pub objectives: ObjectiveWeights,
    pub train: TrainConfig,
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.engine.validate()?;
        self.cf_reward.validate()?;
        self.corrective.validate()?;
        self.objectives.validate()?;
        self.train.validate()?;
        if (self.engine.dt - self.world.dt).abs() > 1e-12 || (self.vocab.dt - self.world.dt).abs() > 1e-12 {
            return Err(Error::InvalidConfig("world, engine and vocab must share dt".into()));
        }
        Ok(())
    }
}

/// Candidates and features for the current world state.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub snapshot: CounterfactualSnapshot,
    pub candidates: CandidateSet,
    pub features: Vec<FeatureRow>,
}

pub fn plan(scenario: &Scenario, state: &WorldState, lab: &LabConfig) -> Result<Plan> {
    let snapshot = snapshot_for_counterfactual(scenario, state, &lab.world)?;
    let candidates = generate_candidates(&snapshot, &lab.vocab);
    let features = candidate_features(&snapshot, &candidates, &lab.vocab);
    Ok(Plan { snapshot, candidates, features })
}

/// Tracks candidate `index` for one decision interval, or until the episode
/// ends. `on_step` sees the state before each step and its outcome.
pub fn execute(
    scenario: &Scenario,
    state: &WorldState,
    plan: &Plan,
    index: usize,
    lab: &LabConfig,
    mut on_step: impl FnMut(&WorldState, &StepOutcome),
) -> Result<WorldState> {
    let traj = plan.candidates.global_trajectory(index, &state.ego);
    let reference = TrackReference::new(&traj)?;
    let mut memory = PidMemory::default();
    let mut current = state.clone();
    for _ in 0..lab.train.decision_interval {
        let (u, mem) = pid_track(&current.ego, &reference, &lab.engine.gains, &memory, &lab.world.limits, lab.world.dt);
        memory = mem;
        let out = step_world(scenario, &current, u, &lab.world)?;
        on_step(&current, &out);
        let done = out.terminal;
        current = out.next_state;
        if done {
            break;
        }
    }
    Ok(current)
}

/// One stored decision of a closed-loop rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTransition {
    pub snapshot: CounterfactualSnapshot,
    pub candidates: CandidateSet,
    pub features: Vec<FeatureRow>,
    pub selected_index: usize,
    pub behavior_log_probability: f64,
    /// Corrective reward summed over the decision interval.
    pub r_gr: f64,
    /// Closed-loop dense reward summed over the decision interval.
    pub r_dense: f64,
    /// The episode continues after this decision.
    pub u_done: bool,
    /// The decision did not end in a true termination.
    pub u_term: bool,
    pub episode_id: u64,
    pub step_index: u32,
    /// Behavior-probability-weighted mean features of this state and the next one.
    pub phi: FeatureRow,
    pub next_phi: FeatureRow,
}

impl RolloutTransition {
    pub fn decision(&self) -> Decision<'_> {
        Decision {
            features: &self.features,
            valid_mask: &self.candidates.valid_mask,
            selected: self.selected_index,
            behavior_log_prob: self.behavior_log_probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: u64,
    pub scenario: String,
    pub terminal: Option<TerminalReason>,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub transitions: Vec<RolloutTransition>,
    pub policy_version: u64,
    pub episodes: Vec<EpisodeSummary>,
}

fn behavior_phi(params: &PolicyParams, plan: &Plan, temperature: f64) -> Result<FeatureRow> {
    Ok(policy_distribution(params, &plan.features, &plan.candidates.valid_mask, temperature)?.mean_features(&plan.features))
}

/// Runs the frozen policy until exactly `size` decisions are stored. Episodes
/// cycle through `scenarios` with per-episode world seeds derived from `seed`.
pub fn collect_rollouts(
    params: &PolicyParams,
    scenarios: &[Scenario],
    lab: &LabConfig,
    size: usize,
    seed: u64,
) -> Result<RolloutBuffer> {
    if scenarios.is_empty() {
        return Err(Error::InvalidConfig("no scenarios to roll out".into()));
    }
    let temperature = lab.train.temperature;
    let mut rng = seeded_rng(seed, 0x524f_4c4c);
    let mut transitions: Vec<RolloutTransition> = Vec::with_capacity(size);
    let mut episodes = Vec::new();
    let mut episode_id = 0u64;
    while transitions.len() < size {
        let scenario = &scenarios[episode_id as usize % scenarios.len()];
        let mut state = reset(scenario, mix_seed(seed, episode_id))?;
        let route = RouteWindow::full(&scenario.route);
        let mut prev_measure = measure_pose(&route, &scenario.lanes, &state.ego.pose, &lab.world.road);
        let mut prev_flags = InfractionFlags::default();
        let mut next_plan: Option<Plan> = None;
        loop {
            let current = match next_plan.take() {
                Some(p) => p,
                None => plan(scenario, &state, lab)?,
            };
            let dist = policy_distribution(params, &current.features, &current.candidates.valid_mask, temperature)?;
            let (index, log_p) = sample_candidate(&dist, &mut rng);
            let phi = dist.mean_features(&current.features);
            let (mut r_gr, mut r_dense) = (0.0, 0.0);
            let next = execute(scenario, &state, &current, index, lab, |_, out| {
                r_gr += corrective_reward(&out.flags, &lab.corrective);
                r_dense += closed_loop_step_reward(
                    &prev_measure,
                    &out.road,
                    &out.flags,
                    &prev_flags,
                    out.next_state.ego.speed,
                    &lab.cf_reward,
                );
                prev_measure = out.road;
                prev_flags = out.flags;
            })?;
            let full = transitions.len() + 1 == size;
            let terminal = next.terminal;
            let u_term = !matches!(terminal, Some(r) if r != TerminalReason::Timeout);
            let u_done = terminal.is_none() && !full;
            let next_phi = if !u_term {
                [0.0; FEATURE_DIM]
            } else {
                // timeouts and buffer truncation still bootstrap from the next state
                let mut probe = next.clone();
                probe.terminal = None;
                let p = plan(scenario, &probe, lab)?;
                let phi_next = behavior_phi(params, &p, temperature)?;
                if terminal.is_none() {
                    next_plan = Some(p);
                }
                phi_next
            };
            transitions.push(RolloutTransition {
                snapshot: current.snapshot,
                candidates: current.candidates,
                features: current.features,
                selected_index: index,
                behavior_log_probability: log_p,
                r_gr,
                r_dense,
                u_done,
                u_term,
                episode_id,
                step_index: state.step_index,
                phi,
                next_phi,
            });
            state = next;
            if !u_done {
                break;
            }
        }
        episodes.push(EpisodeSummary {
            episode_id,
            scenario: scenario.name.clone(),
            terminal: state.terminal,
            steps: state.step_index,
        });
        episode_id += 1;
    }
    Ok(RolloutBuffer { transitions, policy_version: params.version, episodes })
}

/// Group advantages for every stored transition, evaluated in blocks so memory
/// stays bounded. Also returns the mean counterfactual return over valid candidates.
pub fn evaluate_buffer_counterfactuals(
    buffer: &RolloutBuffer,
    reward: &CounterfactualRewardConfig,
    engine: &EngineConfig,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut advantages = Vec::with_capacity(buffer.transitions.len());
    let (mut sum, mut count) = (0.0, 0usize);
    for block in buffer.transitions.chunks(128) {
        let groups: Vec<(&CounterfactualSnapshot, &CandidateSet)> =
            block.iter().map(|t| (&t.snapshot, &t.candidates)).collect();
        for (out, t) in evaluate_groups(&groups, reward, engine)?.into_iter().zip(block) {
            for (r, v) in out.returns.iter().zip(&t.candidates.valid_mask) {
                if *v {
                    sum += r;
                    count += 1;
                }
            }
            advantages.push(out.advantages);
        }
    }
    Ok((advantages, if count > 0 { sum / count as f64 } else { 0.0 }))
}

/// Trainable state carried across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: PolicyParams,
    pub teacher: TeacherParams,
    pub critic: ValueHead,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
    /// Completed rounds.
    pub round: u32,
}

impl TrainState {
    pub fn new(initial: PolicyParams) -> Self {
        TrainState {
            teacher: TeacherParams::from_online(&initial),
            params: initial,
            critic: ValueHead::zeros(),
            actor_opt: OptimizerState::new(FEATURE_DIM),
            critic_opt: OptimizerState::new(FEATURE_DIM),
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_gr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_policy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_value: Option<f64>,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BufferStats {
    pub transitions: usize,
    pub episodes: usize,
    pub collisions: usize,
    pub route_completions: usize,
    pub mean_r_gr: f64,
    pub mean_r_dense: f64,
}

impl BufferStats {
    pub fn of(buffer: &RolloutBuffer) -> Self {
        let n = buffer.transitions.len().max(1) as f64;
        let count = |r: TerminalReason| buffer.episodes.iter().filter(|e| e.terminal == Some(r)).count();
        BufferStats {
            transitions: buffer.transitions.len(),
            episodes: buffer.episodes.len(),
            collisions: count(TerminalReason::Collision),
            route_completions: count(TerminalReason::RouteComplete),
            mean_r_gr: buffer.transitions.iter().map(|t| t.r_gr).sum::<f64>() / n,
            mean_r_dense: buffer.transitions.iter().map(|t| t.r_dense).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub method: Method,
    pub lr: f64,
    pub policy_version: u64,
    pub buffer: BufferStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf_mean_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_corrective_advantage: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub weights: Vec<f64>,
    pub teacher_weights: Vec<f64>,
}

/// Per-transition advantages prepared once per round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreparedAdvantages {
    pub group: Option<Vec<Vec<f64>>>,
    pub scalar: Option<Vec<f64>>,
    pub value_targets: Option<Vec<ValueSample>>,
}

/// Builds the advantages the method needs. `group` must be supplied for the
/// counterfactual methods.
pub fn prepare_advantages(
    method: Method,
    buffer: &RolloutBuffer,
    group: Option<Vec<Vec<f64>>>,
    critic: &ValueHead,
    w: &ObjectiveWeights,
) -> Result<PreparedAdvantages> {
    let tr = &buffer.transitions;
    let u_done: Vec<bool> = tr.iter().map(|t| t.u_done).collect();
    let mut out = PreparedAdvantages::default();
    if method.uses_counterfactuals() {
        let g = group.ok_or_else(|| Error::InvalidConfig(format!("{} needs counterfactual advantages", method.name())))?;
        if g.len() != tr.len() {
            return Err(Error::ShapeMismatch(format!("{} advantage groups for {} transitions", g.len(), tr.len())));
        }
        out.group = Some(g);
    }
    match method {
        Method::Craft => {
            let r: Vec<f64> = tr.iter().map(|t| t.r_gr).collect();
            out.scalar = Some(corrective_advantage(&r, &u_done, w)?);
        }
        Method::Ppo => {
            let r: Vec<f64> = tr.iter().map(|t| t.r_dense).collect();
            let v: Vec<f64> = tr.iter().map(|t| critic.value(&t.phi)).collect();
            let nv: Vec<f64> = tr.iter().map(|t| critic.value(&t.next_phi)).collect();
            let u_term: Vec<bool> = tr.iter().map(|t| t.u_term).collect();
            let (adv, ret) = gae_advantages(&r, &v, &nv, &u_term, &u_done, w)?;
            out.value_targets =
                Some(tr.iter().zip(v.iter().zip(&ret)).map(|(t, (v, r))| ValueSample { phi: t.phi, old_value: *v, target: *r }).collect());
            out.scalar = Some(adv);
        }
        Method::Reinforcepp => {
            let r: Vec<f64> = tr.iter().map(|t| t.r_dense).collect();
            out.scalar = Some(reinforcepp_advantages(&r, &u_done, w)?);
        }
        Method::Grpo | Method::Distill => {}
    }
    Ok(out)
}

/// Loss, gradients and logged components of one method on a set of transitions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MethodLoss {
    pub total: f64,
    pub grad: Grad,
    pub value_grad: Option<Grad>,
    pub metrics: EpochMetrics,
}

pub fn method_loss(
    method: Method,
    state: &TrainState,
    buffer: &RolloutBuffer,
    prepared: &PreparedAdvantages,
    indices: &[usize],
    w: &ObjectiveWeights,
) -> Result<MethodLoss> {
    let tr = &buffer.transitions;
    let decisions: Vec<Decision<'_>> = indices.iter().map(|&i| tr[i].decision()).collect();
    let teacher = state.teacher.as_policy();
    let ratio = clipped_policy_loss(&state.params, &decisions, &vec![0.0; decisions.len()], w.eps_clip)?;
    let mut m = EpochMetrics { mean_ratio: ratio.mean_ratio, clip_fraction: ratio.clip_fraction, ..Default::default() };
    let pick = |v: &Vec<f64>| -> Vec<f64> { indices.iter().map(|&i| v[i]).collect() };
    let mut comp = CraftComponents::default();
    let mut weights = *w;
    let mut value_grad = None;
    match method {
        Method::Craft | Method::Grpo | Method::Distill => {
            if method != Method::Distill {
                let g = prepared.group.as_ref().ok_or_else(|| Error::InvalidConfig("missing group advantages".into()))?;
                let groups: Vec<&[f64]> = indices.iter().map(|&i| g[i].as_slice()).collect();
                let (l, gr) = loss_cp(&state.params, &decisions, &groups)?;
                comp.l_cp = l;
                comp.grad_cp = gr;
                m.l_cp = Some(l);
            } else {
                weights.lambda_cp = 0.0;
            }
            if method == Method::Craft {
                let a = pick(prepared.scalar.as_ref().ok_or_else(|| Error::InvalidConfig("missing corrective advantages".into()))?);
                let r = loss_gr(&state.params, &decisions, &a, w)?;
                comp.l_gr = r.loss;
                comp.grad_gr = r.grad;
                m.l_gr = Some(r.loss);
            } else {
                weights.lambda_gr = 0.0;
                weights.lambda_cp = if method == Method::Grpo { 1.0 } else { 0.0 };
            }
            let kl = kl_losses(&state.params, &teacher, &decisions)?;
            comp.l_dist = kl.l_dist;
            comp.l_kl = kl.l_kl;
            comp.grad_dist = kl.grad_dist;
            comp.grad_kl = kl.grad_kl;
            m.l_dist = Some(kl.l_dist);
            m.l_kl = Some(kl.l_kl);
            let (total, grad) = loss_craft_total(&comp, &weights);
            m.loss = total;
            Ok(MethodLoss { total, grad, value_grad, metrics: m })
        }
        Method::Ppo | Method::Reinforcepp => {
            let a = pick(prepared.scalar.as_ref().ok_or_else(|| Error::InvalidConfig("missing advantages".into()))?);
            let p = clipped_policy_loss(&state.params, &decisions, &a, w.eps_clip)?;
            m.l_policy = Some(p.loss);
            let mut total = p.loss;
            if method == Method::Ppo {
                let targets = prepared.value_targets.as_ref().ok_or_else(|| Error::InvalidConfig("missing value targets".into()))?;
                let samples: Vec<ValueSample> = indices.iter().map(|&i| targets[i]).collect();
                let (vl, vg) = value_loss(&state.critic, &samples, w);
                m.l_value = Some(vl);
                total += vl;
                value_grad = Some(vg);
            }
            m.loss = total;
            Ok(MethodLoss { total, grad: p.grad, value_grad, metrics: m })
        }
    }
}

/// One optimization round: `epochs_per_round` shuffled minibatch passes, then
/// the EMA teacher update. Epoch metrics are measured on the full buffer at
/// the start of each epoch.
pub fn train_round(
    state: &mut TrainState,
    buffer: &RolloutBuffer,
    prepared: &PreparedAdvantages,
    lab: &LabConfig,
) -> Result<(f64, Vec<EpochMetrics>)> {
    let tc = &lab.train;
    let w = &lab.objectives;
    let round = state.round as usize;
    let lr = lr_at(state.round, tc.total_rounds, tc.lr_initial, tc.lr_min);
    let adam = tc.adam();
    let all: Vec<usize> = (0..buffer.transitions.len()).collect();
    let mut rng = seeded_rng(mix_seed(tc.seed, state.round as u64), 0x4550_4f43);
    let mut epochs = Vec::with_capacity(tc.epochs_per_round);
    for epoch in 0..tc.epochs_per_round {
        let full = method_loss(tc.method, state, buffer, prepared, &all, w)?;
        if !full.total.is_finite() {
            return Err(Error::NonFiniteLoss { round, epoch, detail: format!("{:?}", full.metrics) });
        }
        let mut metrics = full.metrics;
        metrics.epoch = epoch + 1;
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(tc.minibatch_size) {
            let mb = method_loss(tc.method, state, buffer, prepared, batch, w)?;
            if !mb.total.is_finite() || mb.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { round, epoch, detail: format!("minibatch loss {}", mb.total) });
            }
            let mut grad = mb.grad;
            norm_sum += clip_global_norm(&mut [&mut grad[..]], tc.grad_clip_norm);
            steps += 1;
            adamw_step(&mut state.params.weights, &grad, &mut state.actor_opt, lr, &adam);
            if let Some(mut vg) = mb.value_grad {
                clip_global_norm(&mut [&mut vg[..]], tc.grad_clip_norm);
                adamw_step(&mut state.critic.weights, &vg, &mut state.critic_opt, lr * w.kappa_v, &adam);
            }
        }
        metrics.grad_norm = norm_sum / steps.max(1) as f64;
        epochs.push(metrics);
    }
    state.params.version += 1;
    state.teacher = ema_update(&state.teacher, &state.params, tc.ema_momentum);
    state.round += 1;
    Ok((lr, epochs))
}

/// Collects, evaluates and trains one round.
pub fn run_round(state: &mut TrainState, scenarios: &[Scenario], lab: &LabConfig) -> Result<RoundMetrics> {
    let tc = &lab.train;
    let seed = mix_seed(tc.seed, 0x1000 + state.round as u64);
    let frozen = state.params.clone();
    let buffer = collect_rollouts(&frozen, scenarios, lab, tc.buffer_size, seed)?;
    let (group, cf_mean) = if tc.method.uses_counterfactuals() {
        let (g, m) = evaluate_buffer_counterfactuals(&buffer, &lab.cf_reward, &lab.engine)?;
        (Some(g), Some(m))
    } else {
        (None, None)
    };
    let prepared = prepare_advantages(tc.method, &buffer, group, &state.critic, &lab.objectives)?;
    let mean_corrective = match tc.method {
        Method::Craft => prepared.scalar.as_ref().map(|a| a.iter().sum::<f64>() / a.len().max(1) as f64),
        _ => None,
    };
    let round = state.round + 1;
    let (lr, epochs) = train_round(state, &buffer, &prepared, lab)?;
    Ok(RoundMetrics {
        round,
        method: tc.method,
        lr,
        policy_version: buffer.policy_version,
        buffer: BufferStats::of(&buffer),
        cf_mean_return: cf_mean,
        mean_corrective_advantage: mean_corrective,
        epochs,
        weights: state.params.weights.clone(),
        teacher_weights: state.teacher.weights.clone(),
    })
}

/// Runs `lab.train.total_rounds` rounds from `initial`, handing every round's
/// state and metrics to `on_round`.
pub fn run_training<E: From<Error>>(
    initial: PolicyParams,
    scenarios: &[Scenario],
    lab: &LabConfig,
    mut on_round: impl FnMut(&TrainState, &RoundMetrics) -> core::result::Result<(), E>,
) -> core::result::Result<TrainState, E> {
    lab.validate()?;
    let mut state = TrainState::new(initial);
    while state.round < lab.train.total_rounds {
        let metrics = run_round(&mut state, scenarios, lab)?;
        on_round(&state, &metrics)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub episodes_per_scenario: usize,
    pub l2: f64,
    pub iterations: usize,
    pub seed: u64,
    pub expert: ExpertConfig,
}

impl Default for BcConfig {
    fn default() -> Self {
        // The demonstrator cruises at 5 m/s rather than the expert's usual 8 so the
        // cloned policy starts out over-cautious and leaves room for fine-tuning.
        BcConfig {
            episodes_per_scenario: 6,
            l2: 1e-2,
            iterations: 50,
            seed: 7,
            expert: ExpertConfig { cruise_speed: 5.0, ..ExpertConfig::default() },
        }
    }
}

/// Drives the rule-based expert through every scenario and records its picks.
pub fn collect_expert_samples(scenarios: &[Scenario], lab: &LabConfig, bc: &BcConfig) -> Result<Vec<BcSample>> {
    let mut samples = Vec::new();
    for (si, scenario) in scenarios.iter().enumerate() {
        for ep in 0..bc.episodes_per_scenario {
            let mut state = reset(scenario, mix_seed(bc.seed, (si * 10_000 + ep) as u64))?;
            while state.terminal.is_none() {
                let p = plan(scenario, &state, lab)?;
                let target = expert_choice(&p.candidates, &p.features, &lab.vocab, &bc.expert);
                state = execute(scenario, &state, &p, target, lab, |_, _| {})?;
                samples.push(BcSample { features: p.features, valid_mask: p.candidates.valid_mask, target });
            }
        }
    }
    Ok(samples)
}

/// Behavior-cloned initial policy.
pub fn pretrain(scenarios: &[Scenario], lab: &LabConfig, bc: &BcConfig) -> Result<PolicyParams> {
    let samples = collect_expert_samples(scenarios, lab, bc)?;
    fit_behavior_cloning(&samples, bc.l2, bc.iterations)
}
