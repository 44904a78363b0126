//! Losses and advantage estimators for CRAFT and the baselines. Every loss
//! returns its value together with the analytic gradient with respect to the
//! scorer weights.
//!
//! Episode masks follow one convention throughout: `u_done[t]` is `true` when
//! the episode continues after step `t`, and `u_term[t]` is `true` unless the
//! step ended in a true termination (a timeout still bootstraps).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::policy::{logprob_grad_from, policy_distribution, FeatureRow, PolicyDistribution, PolicyParams, FEATURE_DIM};
use crate::stats::{mean, std_pop};
use crate::{Error, Result};

pub type Grad = FeatureRow;

fn add_scaled(acc: &mut Grad, s: f64, x: &Grad) {
    for d in 0..FEATURE_DIM {
        acc[d] += s * x[d];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda_cp: f64,
    pub lambda_gr: f64,
    pub beta_r: f64,
    pub beta_f: f64,
    pub eps_clip: f64,
    pub dual_clip_c: f64,
    pub gamma_c: f64,
    pub s_gr: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub gamma: f64,
    pub lambda_gae: f64,
    pub eps_v: f64,
    pub kappa_v: f64,
    pub eps_norm: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            lambda_cp: 1.0,
            lambda_gr: 0.5,
            beta_r: 0.5,
            beta_f: 0.1,
            eps_clip: 0.2,
            dual_clip_c: 2.0,
            gamma_c: 0.8,
            s_gr: 8.0,
            a_min: -1.0,
            a_max: 1.0,
            gamma: 0.98,
            lambda_gae: 0.95,
            eps_v: 2.0,
            kappa_v: 2.0,
            eps_norm: 1e-8,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        if !(self.dual_clip_c > 1.0) {
            return Err(Error::InvalidConfig("dual_clip_c must exceed 1".into()));
        }
        if !open01(self.eps_clip) {
            return Err(Error::InvalidConfig("eps_clip must lie in (0, 1)".into()));
        }
        if !(self.a_min < self.a_max) {
            return Err(Error::InvalidConfig("a_min must be below a_max".into()));
        }
        if !open01(self.gamma) || !open01(self.gamma_c) {
            return Err(Error::InvalidConfig("gamma and gamma_c must lie in (0, 1)".into()));
        }
        if !(self.s_gr > 0.0 && self.eps_v > 0.0 && self.kappa_v > 0.0 && self.eps_norm >= 0.0) {
            return Err(Error::InvalidConfig("s_gr, eps_v and kappa_v must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::InvalidConfig("lambda_gae must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One stored decision: the candidate group and the behavior policy's pick.
#[derive(Debug, Clone, Copy)]
pub struct Decision<'a> {
    pub features: &'a [FeatureRow],
    pub valid_mask: &'a [bool],
    pub selected: usize,
    pub behavior_log_prob: f64,
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Counterfactual proxy loss, an exact expectation over each candidate group.
pub fn loss_cp(params: &PolicyParams, decisions: &[Decision<'_>], advantages: &[&[f64]]) -> Result<(f64, Grad)> {
    check_len("decisions vs advantage groups", decisions.len(), advantages.len())?;
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    if decisions.is_empty() {
        return Ok((loss, grad));
    }
    for (d, adv) in decisions.iter().zip(advantages) {
        check_len("candidates vs advantages", d.features.len(), adv.len())?;
        let dist = policy_distribution(params, d.features, d.valid_mask, 1.0)?;
        let mean_f = dist.mean_features(d.features);
        for (g, (p, a)) in dist.probabilities.iter().zip(adv.iter()).enumerate() {
            if *p == 0.0 {
                continue;
            }
            loss -= p * a;
            for k in 0..FEATURE_DIM {
                grad[k] -= p * a * (d.features[g][k] - mean_f[k]);
            }
        }
    }
    let b = decisions.len() as f64;
    grad.iter_mut().for_each(|g| *g /= b);
    Ok((loss / b, grad))
}

/// Discounted, scaled and clipped return of sparse corrective rewards.
pub fn corrective_advantage(r_gr: &[f64], u_done: &[bool], w: &ObjectiveWeights) -> Result<Vec<f64>> {
    check_len("rewards vs done mask", r_gr.len(), u_done.len())?;
    let mut out = vec![0.0; r_gr.len()];
    let mut next = 0.0;
    for t in (0..r_gr.len()).rev() {
        let g = r_gr[t] + if u_done[t] { w.gamma_c * next } else { 0.0 };
        out[t] = (g / w.s_gr).clamp(w.a_min, w.a_max);
        next = g;
    }
    Ok(out)
}

/// Surrogate value and its derivative with respect to ρ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedTerm {
    pub value: f64,
    pub d_rho: f64,
    /// ρ left `[1−ε, 1+ε]`.
    pub ratio_clipped: bool,
}

/// PPO clip `min(ρÂ, clip(ρ)Â)`. Ties take the unclipped branch.
pub fn clipped_surrogate(rho: f64, a_hat: f64, eps: f64) -> ClippedTerm {
    let unclipped = rho * a_hat;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * a_hat;
    let ratio_clipped = rho < 1.0 - eps || rho > 1.0 + eps;
    if unclipped <= clipped {
        ClippedTerm { value: unclipped, d_rho: a_hat, ratio_clipped }
    } else {
        ClippedTerm { value: clipped, d_rho: 0.0, ratio_clipped }
    }
}

/// Dual-clipped surrogate: the PPO clip, then floored at `c·Â` for negative advantages.
pub fn dual_clip_surrogate(rho: f64, a_hat: f64, w: &ObjectiveWeights) -> f64 {
    dual_clip_term(rho, a_hat, w).value
}

pub fn dual_clip_term(rho: f64, a_hat: f64, w: &ObjectiveWeights) -> ClippedTerm {
    let base = clipped_surrogate(rho, a_hat, w.eps_clip);
    let floor = w.dual_clip_c * a_hat;
    if a_hat < 0.0 && floor > base.value {
        ClippedTerm { value: floor, d_rho: 0.0, ratio_clipped: base.ratio_clipped }
    } else {
        base
    }
}

/// Value, gradient and the share of decisions whose ratio left the clip range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioLoss {
    pub loss: f64,
    pub grad: Grad,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

fn ratio_loss(
    params: &PolicyParams,
    decisions: &[Decision<'_>],
    advantages: &[f64],
    term: impl Fn(f64, f64) -> ClippedTerm,
) -> Result<RatioLoss> {
    check_len("decisions vs advantages", decisions.len(), advantages.len())?;
    let mut out = RatioLoss { loss: 0.0, grad: [0.0; FEATURE_DIM], clip_fraction: 0.0, mean_ratio: 0.0 };
    if decisions.is_empty() {
        return Ok(out);
    }
    for (d, a) in decisions.iter().zip(advantages) {
        let dist = policy_distribution(params, d.features, d.valid_mask, 1.0)?;
        let lp = dist.log_probabilities[d.selected];
        if !lp.is_finite() {
            return Err(Error::SupportMismatch { index: d.selected });
        }
        let rho = (lp - d.behavior_log_prob).exp();
        let t = term(rho, *a);
        out.loss -= t.value;
        out.mean_ratio += rho;
        if t.ratio_clipped {
            out.clip_fraction += 1.0;
        }
        if t.d_rho != 0.0 {
            let g = logprob_grad_from(&dist, d.features, d.selected);
            add_scaled(&mut out.grad, -t.d_rho * rho, &g);
        }
    }
    let b = decisions.len() as f64;
    out.loss /= b;
    out.clip_fraction /= b;
    out.mean_ratio /= b;
    out.grad.iter_mut().for_each(|g| *g /= b);
    Ok(out)
}

/// Value-free dual-clipped grounded loss `−mean u_t`.
pub fn loss_gr(params: &PolicyParams, decisions: &[Decision<'_>], advantages: &[f64], w: &ObjectiveWeights) -> Result<RatioLoss> {
    ratio_loss(params, decisions, advantages, |rho, a| dual_clip_term(rho, a, w))
}

/// Standard clipped surrogate loss shared by PPO and REINFORCE++.
pub fn clipped_policy_loss(params: &PolicyParams, decisions: &[Decision<'_>], advantages: &[f64], eps: f64) -> Result<RatioLoss> {
    ratio_loss(params, decisions, advantages, |rho, a| clipped_surrogate(rho, a, eps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTerms {
    /// Reverse KL(π_θ ‖ π_T).
    pub l_dist: f64,
    /// Forward KL(π_T ‖ π_θ).
    pub l_kl: f64,
    pub grad_dist: Grad,
    pub grad_kl: Grad,
}

/// Exact asymmetric KL terms against the teacher, averaged over states.
pub fn kl_losses(params: &PolicyParams, teacher: &PolicyParams, groups: &[Decision<'_>]) -> Result<KlTerms> {
    let mut out = KlTerms { l_dist: 0.0, l_kl: 0.0, grad_dist: [0.0; FEATURE_DIM], grad_kl: [0.0; FEATURE_DIM] };
    if groups.is_empty() {
        return Ok(out);
    }
    for d in groups {
        let p = policy_distribution(params, d.features, d.valid_mask, 1.0)?;
        let q = policy_distribution(teacher, d.features, d.valid_mask, 1.0)?;
        kl_pair(&p, &q, d.features, &mut out)?;
    }
    let b = groups.len() as f64;
    out.l_dist /= b;
    out.l_kl /= b;
    out.grad_dist.iter_mut().for_each(|g| *g /= b);
    out.grad_kl.iter_mut().for_each(|g| *g /= b);
    Ok(out)
}

fn kl_pair(p: &PolicyDistribution, q: &PolicyDistribution, features: &[FeatureRow], out: &mut KlTerms) -> Result<()> {
    let mean_p = p.mean_features(features);
    let mean_q = q.mean_features(features);
    for g in 0..p.probabilities.len() {
        let (pg, qg) = (p.probabilities[g], q.probabilities[g]);
        if (pg > 0.0 && qg == 0.0) || (qg > 0.0 && pg == 0.0) {
            return Err(Error::SupportMismatch { index: g });
        }
        if pg == 0.0 {
            continue;
        }
        let diff = p.log_probabilities[g] - q.log_probabilities[g];
        out.l_dist += pg * diff;
        out.l_kl -= qg * diff;
        for k in 0..FEATURE_DIM {
            out.grad_dist[k] += pg * diff * (features[g][k] - mean_p[k]);
        }
    }
    for k in 0..FEATURE_DIM {
        out.grad_kl[k] += mean_p[k] - mean_q[k];
    }
    Ok(())
}

/// Per-component losses and gradients entering the CRAFT objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CraftComponents {
    pub l_cp: f64,
    pub l_gr: f64,
    pub l_dist: f64,
    pub l_kl: f64,
    pub grad_cp: Grad,
    pub grad_gr: Grad,
    pub grad_dist: Grad,
    pub grad_kl: Grad,
}

pub fn loss_craft_total(c: &CraftComponents, w: &ObjectiveWeights) -> (f64, Grad) {
    let loss = w.lambda_cp * c.l_cp + w.lambda_gr * c.l_gr + w.beta_r * c.l_dist + w.beta_f * c.l_kl;
    let mut grad = [0.0; FEATURE_DIM];
    add_scaled(&mut grad, w.lambda_cp, &c.grad_cp);
    add_scaled(&mut grad, w.lambda_gr, &c.grad_gr);
    add_scaled(&mut grad, w.beta_r, &c.grad_dist);
    add_scaled(&mut grad, w.beta_f, &c.grad_kl);
    (loss, grad)
}

/// GRPO: proxy loss plus both KL anchors, no grounded term.
pub fn grpo_loss(
    params: &PolicyParams,
    teacher: &PolicyParams,
    decisions: &[Decision<'_>],
    advantages: &[&[f64]],
    w: &ObjectiveWeights,
) -> Result<(f64, Grad)> {
    let (l_cp, grad_cp) = loss_cp(params, decisions, advantages)?;
    let kl = kl_losses(params, teacher, decisions)?;
    let c = CraftComponents { l_cp, grad_cp, l_dist: kl.l_dist, l_kl: kl.l_kl, grad_dist: kl.grad_dist, grad_kl: kl.grad_kl, ..Default::default() };
    Ok(loss_craft_total(&c, &ObjectiveWeights { lambda_cp: 1.0, lambda_gr: 0.0, ..*w }))
}

/// Generalized advantage estimates and λ-returns.
/// `next_values[t]` is the critic's value of the state after step `t`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    u_term: &[bool],
    u_done: &[bool],
    w: &ObjectiveWeights,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for (what, len) in [("values", values.len()), ("next values", next_values.len()), ("term mask", u_term.len()), ("done mask", u_done.len())] {
        check_len(what, n, len)?;
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let boot = if u_term[t] { w.gamma * next_values[t] } else { 0.0 };
        let delta = rewards[t] + boot - values[t];
        adv[t] = delta + if u_done[t] { w.gamma * w.lambda_gae * next } else { 0.0 };
        next = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Batch-normalized discounted Monte Carlo returns.
pub fn reinforcepp_advantages(rewards: &[f64], u_done: &[bool], w: &ObjectiveWeights) -> Result<Vec<f64>> {
    check_len("rewards vs done mask", rewards.len(), u_done.len())?;
    let mut g = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        g[t] = rewards[t] + if u_done[t] { w.gamma * next } else { 0.0 };
        next = g[t];
    }
    let mu = mean(&g);
    let sd = std_pop(&g);
    Ok(g.iter().map(|x| (x - mu) / (sd + w.eps_norm)).collect())
}

/// Affine critic over state-level aggregate features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub weights: Vec<f64>,
}

impl ValueHead {
    pub fn zeros() -> Self {
        ValueHead { weights: vec![0.0; FEATURE_DIM] }
    }

    pub fn value(&self, phi: &FeatureRow) -> f64 {
        phi.iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// One critic training target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueSample {
    pub phi: FeatureRow,
    pub old_value: f64,
    pub target: f64,
}

/// Clipped SmoothL1 value loss, averaged, with its gradient in the critic weights.
pub fn value_loss(critic: &ValueHead, samples: &[ValueSample], w: &ObjectiveWeights) -> (f64, Grad) {
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    if samples.is_empty() {
        return (loss, grad);
    }
    for s in samples {
        let v = critic.value(&s.phi);
        let delta = v - s.old_value;
        let v_clip = s.old_value + delta.clamp(-w.eps_v, w.eps_v);
        let (l_un, d_un) = smooth_l1(v - s.target);
        let (l_cl, d_cl) = smooth_l1(v_clip - s.target);
        let inside = delta.abs() <= w.eps_v;
        if l_un >= l_cl {
            loss += l_un;
            add_scaled(&mut grad, d_un, &s.phi);
        } else {
            loss += l_cl;
            if inside {
                add_scaled(&mut grad, d_cl, &s.phi);
            }
        }
    }
    let b = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= b);
    (loss / b, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLosses {
    pub policy: RatioLoss,
    pub value_loss: f64,
    pub value_grad: Grad,
}

/// PPO actor and critic losses. The critic gradient is meant for a step with
/// `kappa_v` times the actor learning rate.
pub fn ppo_losses(
    params: &PolicyParams,
    critic: &ValueHead,
    decisions: &[Decision<'_>],
    advantages: &[f64],
    values: &[ValueSample],
    w: &ObjectiveWeights,
) -> Result<PpoLosses> {
    let policy = clipped_policy_loss(params, decisions, advantages, w.eps_clip)?;
    let (value_loss, value_grad) = value_loss(critic, values, w);
    Ok(PpoLosses { policy, value_loss, value_grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w() -> ObjectiveWeights {
        ObjectiveWeights::default()
    }

    #[test]
    fn defaults_validate() {
        assert!(w().validate().is_ok());
        assert!(ObjectiveWeights { dual_clip_c: 1.0, ..w() }.validate().is_err());
        assert!(ObjectiveWeights { eps_clip: 1.0, ..w() }.validate().is_err());
    }

    #[test]
    fn dual_clip_examples() {
        assert_eq!(dual_clip_surrogate(1.0, 0.5, &w()), 0.5);
        assert!((dual_clip_surrogate(10.0, -1.0, &w()) + 2.0).abs() < 1e-15);
        assert!((dual_clip_surrogate(10.0, 1.0, &w()) - 1.2).abs() < 1e-15);
        assert_eq!(dual_clip_surrogate(5.0, 0.0, &w()), 0.0);
    }

    #[test]
    fn corrective_examples() {
        let a = corrective_advantage(&[0.0, 0.0, -5.0], &[true, true, false], &w()).unwrap();
        assert!((a[2] + 0.625).abs() < 1e-15);
        assert!((a[1] + 0.5).abs() < 1e-15);
        let streak = corrective_advantage(&[-5.0; 10], &[true; 10], &w()).unwrap();
        assert_eq!(streak[0], -1.0);
        assert!(corrective_advantage(&[0.0; 4], &[true; 4], &w()).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cp_two_candidate_example() {
        let f = [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]];
        let mask = [true, true];
        let d = Decision { features: &f, valid_mask: &mask, selected: 0, behavior_log_prob: 0.0 };
        let adv = [1.0, -1.0];
        let (l, g) = loss_cp(&PolicyParams::zeros(), &[d], &[&adv]).unwrap();
        assert!(l.abs() < 1e-15);
        // descending the gradient raises the first candidate's logit
        assert!(g[0] < 0.0);
    }

    #[test]
    fn kl_example() {
        let p = crate::policy::softmax_masked(&[0.9f64.ln(), 0.1f64.ln()], &[true, true], 1.0).unwrap();
        let q = crate::policy::softmax_masked(&[0.0, 0.0], &[true, true], 1.0).unwrap();
        let f = [[0.0; FEATURE_DIM]; 2];
        let mut out = KlTerms { l_dist: 0.0, l_kl: 0.0, grad_dist: [0.0; FEATURE_DIM], grad_kl: [0.0; FEATURE_DIM] };
        kl_pair(&p, &q, &f, &mut out).unwrap();
        assert!((out.l_dist - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-12);
        assert!((out.l_dist - 0.3681).abs() < 1e-4);
        assert!(out.l_kl > 0.0);
    }

    #[test]
    fn total_weights() {
        let c = CraftComponents { l_cp: 1.0, l_gr: 1.0, l_dist: 1.0, l_kl: 1.0, ..Default::default() };
        assert!((loss_craft_total(&c, &w()).0 - 2.1).abs() < 1e-15);
    }

    #[test]
    fn gae_simple_cases() {
        let (a, r) = gae_advantages(&[1.0], &[0.0], &[0.0], &[false], &[false], &w()).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = gae_advantages(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[true; 3], &[true; 3], &w()).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn reinforcepp_examples() {
        let a = reinforcepp_advantages(&[2.0, 0.0], &[false, false], &w()).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-7 && (a[1] + 1.0).abs() < 1e-7);
        let same = reinforcepp_advantages(&[1.0, 1.0, 1.0], &[false; 3], &w()).unwrap();
        assert!(same.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn value_loss_cases() {
        let phi = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let critic = ValueHead { weights: vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] };
        let exact = ValueSample { phi, old_value: 3.0, target: 3.0 };
        assert_eq!(value_loss(&critic, &[exact], &w()).0, 0.0);
        // critic moved 5 past the old value toward the target: clipped branch dominates
        let far = ValueSample { phi, old_value: -2.0, target: 3.0 };
        let (l, g) = value_loss(&critic, &[far], &w());
        assert!((l - 2.5).abs() < 1e-12);
        assert_eq!(g, [0.0; FEATURE_DIM]);
    }
}
