//! Central finite differences against every analytic objective gradient on
//! seeded random batches. Ratio and value samples are drawn away from clip
//! boundaries and kinks, where the losses are not differentiable.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::objectives::*;
use crate::policy::{policy_distribution, FeatureRow, PolicyParams, FEATURE_DIM};
use crate::{seeded_rng, Result};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
/// Absolute slack for components whose true value is zero.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub objective: String,
    pub batches: u64,
    /// Largest `|fd - analytic| / (REL_TOL · scale + ABS_FLOOR)`; at most 1 passes.
    pub worst_ratio: f64,
    /// Largest `|fd - analytic| / scale` over components with a non-negligible scale.
    pub worst_relative_error: f64,
}

impl GradientCheck {
    fn new(objective: &str, batches: u64) -> Self {
        GradientCheck { objective: objective.into(), batches, worst_ratio: 0.0, worst_relative_error: 0.0 }
    }

    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }

    fn compare(&mut self, analytic: &[f64], f: impl Fn(&[f64]) -> f64, at: &[f64]) {
        for k in 0..at.len() {
            let mut up = at.to_vec();
            let mut down = at.to_vec();
            up[k] += STEP;
            down[k] -= STEP;
            let fd = (f(&up) - f(&down)) / (2.0 * STEP);
            let err = (fd - analytic[k]).abs();
            let scale = 0.5 * (fd.abs() + analytic[k].abs());
            self.worst_ratio = self.worst_ratio.max(err / (REL_TOL * scale + ABS_FLOOR));
            if scale > 1e-6 {
                self.worst_relative_error = self.worst_relative_error.max(err / scale);
            }
        }
    }
}

struct Group {
    features: Vec<FeatureRow>,
    mask: Vec<bool>,
    selected: usize,
    behavior: f64,
}

fn random_params(rng: &mut ChaCha8Rng) -> PolicyParams {
    PolicyParams { weights: (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(), version: 0 }
}

fn random_groups(rng: &mut ChaCha8Rng, n: usize) -> Vec<Group> {
    (0..n)
        .map(|_| {
            let g = rng.gen_range(2..=25);
            let features = (0..g)
                .map(|_| {
                    let mut f = [0.0; FEATURE_DIM];
                    f.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
                    f
                })
                .collect();
            let mut mask: Vec<bool> = (0..g).map(|_| rng.gen::<f64>() < 0.8).collect();
            let first = rng.gen_range(0..g);
            mask[first] = true;
            let valid: Vec<usize> = (0..g).filter(|k| mask[*k]).collect();
            let selected = valid[rng.gen_range(0..valid.len())];
            Group { features, mask, selected, behavior: 0.0 }
        })
        .collect()
}

fn decisions(groups: &[Group]) -> Vec<Decision<'_>> {
    groups
        .iter()
        .map(|g| Decision { features: &g.features, valid_mask: &g.mask, selected: g.selected, behavior_log_prob: g.behavior })
        .collect()
}

/// Sets each behavior log-prob so the current ratio is a random value that
/// stays at least 1e-3 away from every switching point of the surrogates.
fn set_behavior(rng: &mut ChaCha8Rng, params: &PolicyParams, groups: &mut [Group], w: &ObjectiveWeights) -> Result<()> {
    let kinks = [1.0 - w.eps_clip, 1.0 + w.eps_clip, w.dual_clip_c];
    for g in groups.iter_mut() {
        let lp = policy_distribution(params, &g.features, &g.mask, 1.0)?.log_probabilities[g.selected];
        let rho = loop {
            let r: f64 = rng.gen_range(0.3..3.0);
            if kinks.iter().all(|k| (r - k).abs() > 1e-3) {
                break r;
            }
        };
        g.behavior = lp - rho.ln();
    }
    Ok(())
}

fn random_advantages(rng: &mut ChaCha8Rng, groups: &[Group]) -> Vec<Vec<f64>> {
    groups.iter().map(|g| g.mask.iter().map(|v| if *v { rng.gen_range(-2.0..2.0) } else { 0.0 }).collect()).collect()
}

fn with_weights(params: &PolicyParams, w: &[f64]) -> PolicyParams {
    PolicyParams { weights: w.to_vec(), version: params.version }
}

pub fn check_loss_cp(batches: u64) -> Result<GradientCheck> {
    let mut c = GradientCheck::new("L_cp", batches);
    for b in 0..batches {
        let mut rng = seeded_rng(b, 1);
        let params = random_params(&mut rng);
        let groups = random_groups(&mut rng, 8);
        let adv = random_advantages(&mut rng, &groups);
        let adv_refs: Vec<&[f64]> = adv.iter().map(|a| a.as_slice()).collect();
        let ds = decisions(&groups);
        let (_, grad) = loss_cp(&params, &ds, &adv_refs)?;
        c.compare(&grad, |x| loss_cp(&with_weights(&params, x), &ds, &adv_refs).map_or(f64::NAN, |l| l.0), &params.weights);
    }
    Ok(c)
}

pub fn check_loss_gr(batches: u64) -> Result<GradientCheck> {
    let w = ObjectiveWeights::default();
    let mut c = GradientCheck::new("L_gr", batches);
    for b in 0..batches {
        let mut rng = seeded_rng(b, 2);
        let params = random_params(&mut rng);
        let mut groups = random_groups(&mut rng, 16);
        set_behavior(&mut rng, &params, &mut groups, &w)?;
        let adv: Vec<f64> = groups.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ds = decisions(&groups);
        let grad = loss_gr(&params, &ds, &adv, &w)?.grad;
        c.compare(&grad, |x| loss_gr(&with_weights(&params, x), &ds, &adv, &w).map_or(f64::NAN, |l| l.loss), &params.weights);
    }
    Ok(c)
}

/// Both self-distillation terms: `(L_dist, L_KL)`.
pub fn check_kl_terms(batches: u64) -> Result<(GradientCheck, GradientCheck)> {
    let (mut cd, mut ck) = (GradientCheck::new("L_dist", batches), GradientCheck::new("L_KL", batches));
    for b in 0..batches {
        let mut rng = seeded_rng(b, 3);
        let params = random_params(&mut rng);
        let teacher = random_params(&mut rng);
        let groups = random_groups(&mut rng, 8);
        let ds = decisions(&groups);
        let kl = kl_losses(&params, &teacher, &ds)?;
        let eval = |x: &[f64]| kl_losses(&with_weights(&params, x), &teacher, &ds).ok();
        cd.compare(&kl.grad_dist, |x| eval(x).map_or(f64::NAN, |k| k.l_dist), &params.weights);
        ck.compare(&kl.grad_kl, |x| eval(x).map_or(f64::NAN, |k| k.l_kl), &params.weights);
    }
    Ok((cd, ck))
}

/// PPO clipped policy loss and clipped value loss: `(policy, value)`.
pub fn check_ppo(batches: u64) -> Result<(GradientCheck, GradientCheck)> {
    let w = ObjectiveWeights::default();
    let (mut cp, mut cv) = (GradientCheck::new("PPO policy", batches), GradientCheck::new("PPO value", batches));
    let smooth = |x: f64| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
    for b in 0..batches {
        let mut rng = seeded_rng(b, 4);
        let params = random_params(&mut rng);
        let mut groups = random_groups(&mut rng, 16);
        set_behavior(&mut rng, &params, &mut groups, &w)?;
        let adv: Vec<f64> = groups.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ds = decisions(&groups);
        let critic = ValueHead { weights: (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let values: Vec<ValueSample> = (0..16)
            .map(|_| {
                let mut phi = [0.0; FEATURE_DIM];
                phi.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                let v = critic.value(&phi);
                // keep clear of the clip edge, the SmoothL1 kink and ties between branches
                loop {
                    let old_value = v + rng.gen_range(-4.0..4.0);
                    let target = v + rng.gen_range(-4.0..4.0);
                    let delta = v - old_value;
                    let v_clip = old_value + delta.clamp(-w.eps_v, w.eps_v);
                    let clear = (delta.abs() - w.eps_v).abs() > 1e-2
                        && ((v - target).abs() - 1.0).abs() > 1e-2
                        && ((v_clip - target).abs() - 1.0).abs() > 1e-2
                        && (smooth(v - target) - smooth(v_clip - target)).abs() > 1e-2;
                    if clear {
                        break ValueSample { phi, old_value, target };
                    }
                }
            })
            .collect();
        let p = ppo_losses(&params, &critic, &ds, &adv, &values, &w)?;
        cp.compare(
            &p.policy.grad,
            |x| ppo_losses(&with_weights(&params, x), &critic, &ds, &adv, &values, &w).map_or(f64::NAN, |l| l.policy.loss),
            &params.weights,
        );
        cv.compare(&p.value_grad, |x| value_loss(&ValueHead { weights: x.to_vec() }, &values, &w).0, &critic.weights);
    }
    Ok((cp, cv))
}

pub fn check_reinforcepp(batches: u64) -> Result<GradientCheck> {
    let w = ObjectiveWeights::default();
    let mut c = GradientCheck::new("REINFORCE++", batches);
    for b in 0..batches {
        let mut rng = seeded_rng(b, 5);
        let params = random_params(&mut rng);
        let mut groups = random_groups(&mut rng, 16);
        set_behavior(&mut rng, &params, &mut groups, &w)?;
        let rewards: Vec<f64> = groups.iter().map(|_| rng.gen_range(-3.0..1.0)).collect();
        let done: Vec<bool> = groups.iter().map(|_| rng.gen::<f64>() < 0.9).collect();
        let adv = reinforcepp_advantages(&rewards, &done, &w)?;
        let ds = decisions(&groups);
        let grad = clipped_policy_loss(&params, &ds, &adv, w.eps_clip)?.grad;
        c.compare(
            &grad,
            |x| clipped_policy_loss(&with_weights(&params, x), &ds, &adv, w.eps_clip).map_or(f64::NAN, |l| l.loss),
            &params.weights,
        );
    }
    Ok(c)
}

pub fn check_grpo(batches: u64) -> Result<GradientCheck> {
    let w = ObjectiveWeights::default();
    let mut c = GradientCheck::new("GRPO", batches);
    for b in 0..batches {
        let mut rng = seeded_rng(b, 6);
        let params = random_params(&mut rng);
        let teacher = random_params(&mut rng);
        let groups = random_groups(&mut rng, 8);
        let adv = random_advantages(&mut rng, &groups);
        let adv_refs: Vec<&[f64]> = adv.iter().map(|a| a.as_slice()).collect();
        let ds = decisions(&groups);
        let (_, grad) = grpo_loss(&params, &teacher, &ds, &adv_refs, &w)?;
        c.compare(
            &grad,
            |x| grpo_loss(&with_weights(&params, x), &teacher, &ds, &adv_refs, &w).map_or(f64::NAN, |l| l.0),
            &params.weights,
        );
    }
    Ok(c)
}

pub fn check_craft_total(batches: u64) -> Result<GradientCheck> {
    let w = ObjectiveWeights::default();
    let mut c = GradientCheck::new("CRAFT total", batches);
    for b in 0..batches {
        let mut rng = seeded_rng(b, 7);
        let params = random_params(&mut rng);
        let teacher = random_params(&mut rng);
        let mut groups = random_groups(&mut rng, 12);
        set_behavior(&mut rng, &params, &mut groups, &w)?;
        let adv = random_advantages(&mut rng, &groups);
        let adv_refs: Vec<&[f64]> = adv.iter().map(|a| a.as_slice()).collect();
        let gr: Vec<f64> = groups.iter().map(|_| rng.gen_range(-1.0..0.0)).collect();
        let ds = decisions(&groups);
        let total = |x: &[f64]| -> Result<(f64, Grad)> {
            let p = with_weights(&params, x);
            let (l_cp, grad_cp) = loss_cp(&p, &ds, &adv_refs)?;
            let g = loss_gr(&p, &ds, &gr, &w)?;
            let kl = kl_losses(&p, &teacher, &ds)?;
            let comp = CraftComponents {
                l_cp,
                l_gr: g.loss,
                l_dist: kl.l_dist,
                l_kl: kl.l_kl,
                grad_cp,
                grad_gr: g.grad,
                grad_dist: kl.grad_dist,
                grad_kl: kl.grad_kl,
            };
            Ok(loss_craft_total(&comp, &w))
        };
        let (_, grad) = total(&params.weights)?;
        c.compare(&grad, |x| total(x).map_or(f64::NAN, |t| t.0), &params.weights);
    }
    Ok(c)
}

/// Every objective, in a fixed order.
pub fn check_all(batches: u64) -> Result<Vec<GradientCheck>> {
    let (dist, kl) = check_kl_terms(batches)?;
    let (ppo_p, ppo_v) = check_ppo(batches)?;
    Ok(vec![
        check_loss_cp(batches)?,
        check_loss_gr(batches)?,
        dist,
        kl,
        ppo_p,
        ppo_v,
        check_reinforcepp(batches)?,
        check_grpo(batches)?,
        check_craft_total(batches)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut c = GradientCheck::new("x^2", 1);
        c.compare(&[2.0 * 3.0 + 1e-3], |x| x[0] * x[0], &[3.0]);
        assert!(!c.passed());
        let mut c = GradientCheck::new("x^2", 1);
        c.compare(&[2.0 * 3.0], |x| x[0] * x[0], &[3.0]);
        assert!(c.passed(), "{c:?}");
    }
}
