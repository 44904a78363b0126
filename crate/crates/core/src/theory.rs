//! Numerical checks of the proxy-residual theory on small enumerable problems.
//!
//! Policies here are tabular linear-softmax policies, so every expectation is an
//! exact finite sum. The only sampled quantities are the dual-clip sweep and the
//! Monte Carlo estimator comparison.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::evaluate_group;
use crate::objectives::{dual_clip_surrogate, ObjectiveWeights};
use crate::trainer::{execute, plan, LabConfig};
use crate::world::{reset, templates::TemplateKind};
use crate::{mix_seed, seeded_rng, Error, Result};

const KERNEL_TOL: f64 = 1e-12;

/// A finite discounted MDP whose actions are trajectory candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerableMDP {
    pub n_states: usize,
    pub n_candidates: usize,
    /// `P(s' | s, τ)` stored at `(s * n_candidates + τ) * n_states + s'`.
    pub transitions: Vec<f64>,
    /// `r(s, τ)` stored at `s * n_candidates + τ`.
    pub rewards: Vec<f64>,
    pub gamma: f64,
    pub initial: Vec<f64>,
}

impl EnumerableMDP {
    pub fn new(
        n_states: usize,
        n_candidates: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if transitions.len() != n_states * n_candidates * n_states
            || rewards.len() != n_states * n_candidates
            || initial.len() != n_states
        {
            return Err(Error::ShapeMismatch(format!("mdp tables for {n_states} states x {n_candidates} candidates")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidConfig("mdp discount must lie in [0, 1)".into()));
        }
        for s in 0..n_states {
            for a in 0..n_candidates {
                let row = &transitions[(s * n_candidates + a) * n_states..][..n_states];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > KERNEL_TOL || row.iter().any(|p| *p < 0.0) {
                    return Err(Error::NonStochasticKernel { state: s, candidate: a, sum });
                }
            }
        }
        let init_sum: f64 = initial.iter().sum();
        if (init_sum - 1.0).abs() > KERNEL_TOL {
            return Err(Error::NonStochasticKernel { state: n_states, candidate: 0, sum: init_sum });
        }
        Ok(EnumerableMDP { n_states, n_candidates, transitions, rewards, gamma, initial })
    }

    /// Dense random kernel, rewards in [-1, 1] and a random initial distribution.
    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_candidates: usize, gamma: f64) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_candidates * n_states);
        for _ in 0..n_states * n_candidates {
            // sparse-ish rows make visitation measures less uniform
            let mut row: Vec<f64> =
                (0..n_states).map(|_| if rng.gen::<f64>() < 0.3 { rng.gen::<f64>() } else { 0.0 }).collect();
            let k = rng.gen_range(0..n_states);
            row[k] += 0.1;
            let sum: f64 = row.iter().sum();
            transitions.extend(row.iter().map(|p| p / sum));
        }
        let rewards = (0..n_states * n_candidates).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let init: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = init.iter().sum();
        Self::new(n_states, n_candidates, transitions, rewards, gamma, init.iter().map(|x| x / sum).collect())
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_candidates + a) * self.n_states + next]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_candidates + a]
    }
}

/// `π(τ|s) ∝ exp(θ·ψ(s, τ))` with fixed per-pair features ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_candidates: usize,
    pub dim: usize,
    /// `ψ(s, τ)` stored at `(s * n_candidates + τ) * dim`.
    pub features: Vec<f64>,
    pub theta: Vec<f64>,
}

impl TabularPolicy {
    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_candidates: usize, dim: usize) -> Self {
        TabularPolicy {
            n_states,
            n_candidates,
            dim,
            features: (0..n_states * n_candidates * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            theta: (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        }
    }

    fn psi(&self, s: usize, a: usize) -> &[f64] {
        &self.features[(s * self.n_candidates + a) * self.dim..][..self.dim]
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let logits: Vec<f64> =
            (0..self.n_candidates).map(|a| self.psi(s, a).iter().zip(&self.theta).map(|(x, t)| x * t).sum()).collect();
        softmax(&logits)
    }

    /// `∇θ log π(τ|s) = ψ(s, τ) − E_π[ψ(s, ·)]`.
    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let pi = self.probs(s);
        let mut g = self.psi(s, a).to_vec();
        for (b, pb) in pi.iter().enumerate() {
            for (gi, x) in g.iter_mut().zip(self.psi(s, b)) {
                *gi -= pb * x;
            }
        }
        g
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn check_shapes(mdp: &EnumerableMDP, policy: &TabularPolicy) -> Result<()> {
    if mdp.n_states != policy.n_states || mdp.n_candidates != policy.n_candidates {
        return Err(Error::ShapeMismatch("policy does not match the mdp".into()));
    }
    Ok(())
}

/// `I − γ P_π` as a dense matrix.
fn resolvent_matrix(mdp: &EnumerableMDP, policy: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.n_states;
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        let pi = policy.probs(s);
        for (a, pa) in pi.iter().enumerate() {
            for next in 0..n {
                m[(s, next)] -= mdp.gamma * pa * mdp.p(s, a, next);
            }
        }
    }
    m
}

/// Exact policy evaluation. Tables are indexed like the reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub values: Vec<f64>,
    pub q: Vec<f64>,
    pub advantages: Vec<f64>,
}

pub fn solve_real_advantage(mdp: &EnumerableMDP, policy: &TabularPolicy) -> Result<PolicyEvaluation> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states;
    let k = mdp.n_candidates;
    let r_pi = DVector::from_iterator(
        n,
        (0..n).map(|s| policy.probs(s).iter().enumerate().map(|(a, p)| p * mdp.r(s, a)).sum::<f64>()),
    );
    let v = resolvent_matrix(mdp, policy).lu().solve(&r_pi).ok_or(Error::Singular)?;
    let mut q = vec![0.0; n * k];
    for s in 0..n {
        for a in 0..k {
            q[s * k + a] = mdp.r(s, a) + mdp.gamma * (0..n).map(|x| mdp.p(s, a, x) * v[x]).sum::<f64>();
        }
    }
    let values: Vec<f64> = v.iter().cloned().collect();
    let advantages = q.iter().enumerate().map(|(i, qi)| qi - values[i / k]).collect();
    Ok(PolicyEvaluation { values, q, advantages })
}

/// Normalized discounted state-visitation measure `d(s) = (1−γ) Σ_t γ^t Pr(s_t = s)`.
pub fn visitation_measure(mdp: &EnumerableMDP, policy: &TabularPolicy) -> Result<Vec<f64>> {
    check_shapes(mdp, policy)?;
    let mu = DVector::from_column_slice(&mdp.initial);
    let x = resolvent_matrix(mdp, policy).transpose().lu().solve(&mu).ok_or(Error::Singular)?;
    Ok(x.iter().map(|v| (1.0 - mdp.gamma) * v).collect())
}

/// `J = Σ_s μ(s) V(s)`.
pub fn objective_value(mdp: &EnumerableMDP, policy: &TabularPolicy) -> Result<f64> {
    let ev = solve_real_advantage(mdp, policy)?;
    Ok(mdp.initial.iter().zip(&ev.values).map(|(m, v)| m * v).sum())
}

/// `Σ_s d(s) Σ_τ π(τ|s) ∇log π(τ|s) table(s, τ)`.
fn score_expectation(policy: &TabularPolicy, d: &[f64], table: &[f64]) -> Vec<f64> {
    let k = policy.n_candidates;
    let mut g = vec![0.0; policy.dim];
    for (s, ds) in d.iter().enumerate() {
        let pi = policy.probs(s);
        for a in 0..k {
            let w = ds * pi[a] * table[s * k + a];
            for (gi, x) in g.iter_mut().zip(policy.score(s, a)) {
                *gi += w * x;
            }
        }
    }
    g
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionCheck {
    /// `E_d E_π[∇log π · A]` with the normalized visitation measure.
    pub lhs: Vec<f64>,
    pub proxy_term: Vec<f64>,
    pub residual_term: Vec<f64>,
    pub gap: f64,
}

/// Real policy gradient against the proxy term plus the residual term, for a
/// proxy table `Φ(s, τ)` indexed like the reward table.
pub fn check_exact_decomposition(mdp: &EnumerableMDP, policy: &TabularPolicy, proxy: &[f64]) -> Result<DecompositionCheck> {
    if proxy.len() != mdp.rewards.len() {
        return Err(Error::ShapeMismatch("proxy table".into()));
    }
    let ev = solve_real_advantage(mdp, policy)?;
    let d = visitation_measure(mdp, policy)?;
    let residual: Vec<f64> = ev.advantages.iter().zip(proxy).map(|(a, p)| a - p).collect();
    let lhs = score_expectation(policy, &d, &ev.advantages);
    let proxy_term = score_expectation(policy, &d, proxy);
    let residual_term = score_expectation(policy, &d, &residual);
    let sum: Vec<f64> = proxy_term.iter().zip(&residual_term).map(|(a, b)| a + b).collect();
    let gap = max_abs_diff(&lhs, &sum);
    Ok(DecompositionCheck { lhs, proxy_term, residual_term, gap })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    /// `Var[Y − αC]` by direct enumeration.
    pub lhs: f64,
    /// `Var[Y] + α²Var[C] − 2α Cov[Y, C]`.
    pub rhs: f64,
    pub alpha_star: f64,
    pub var_y: f64,
    pub var_c: f64,
    pub cov: f64,
    /// `Cov > Var[C] / 2`.
    pub reduction_predicted: bool,
    /// `Var[Y − C] < Var[Y]`, evaluated directly.
    pub reduction_observed: bool,
}

fn moments(pi: &[f64], f: impl Fn(usize) -> f64) -> (f64, f64) {
    let m: f64 = pi.iter().enumerate().map(|(i, p)| p * f(i)).sum();
    let var = pi.iter().enumerate().map(|(i, p)| p * (f(i) - m) * (f(i) - m)).sum();
    (m, var)
}

pub fn check_variance_identity(y: &[f64], c: &[f64], pi: &[f64], alpha: f64) -> Result<VarianceCheck> {
    if y.len() != pi.len() || c.len() != pi.len() {
        return Err(Error::ShapeMismatch("variance identity tables".into()));
    }
    let (my, var_y) = moments(pi, |i| y[i]);
    let (mc, var_c) = moments(pi, |i| c[i]);
    if !(var_c > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let cov: f64 = pi.iter().enumerate().map(|(i, p)| p * (y[i] - my) * (c[i] - mc)).sum();
    let (_, lhs) = moments(pi, |i| y[i] - alpha * c[i]);
    let rhs = var_y + alpha * alpha * var_c - 2.0 * alpha * cov;
    let (_, var_diff) = moments(pi, |i| y[i] - c[i]);
    Ok(VarianceCheck {
        lhs,
        rhs,
        alpha_star: cov / var_c,
        var_y,
        var_c,
        cov,
        reduction_predicted: cov > 0.5 * var_c,
        reduction_observed: var_diff < var_y,
    })
}

/// `p* ∝ q · exp(U / η)`.
pub fn kl_proximal_solution(q: &[f64], u: &[f64], eta: f64) -> Vec<f64> {
    let logits: Vec<f64> = q.iter().zip(u).map(|(qi, ui)| qi.ln() + ui / eta).collect();
    softmax(&logits)
}

/// `E_p[U] − η KL(p‖q)`, with `0 log 0 = 0`.
pub fn kl_proximal_objective(p: &[f64], q: &[f64], u: &[f64], eta: f64) -> f64 {
    let mut v = 0.0;
    for i in 0..p.len() {
        v += p[i] * u[i];
        if p[i] > 0.0 {
            v -= eta * p[i] * (p[i] / q[i]).ln();
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProximalCheck {
    pub closed_form: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tv_gap: f64,
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Grid search over the 2- or 3-simplex. A 1e-3 lattice locates the basin,
/// then progressively finer local lattices pin the maximizer down.
fn simplex_grid_argmax(f: &dyn Fn(&[f64]) -> f64, n: usize) -> Vec<f64> {
    let point = |a: f64, b: f64| -> Option<Vec<f64>> {
        match n {
            2 => (0.0..=1.0).contains(&a).then(|| vec![a, 1.0 - a]),
            _ => (a >= 0.0 && b >= 0.0 && a + b <= 1.0).then(|| vec![a, b, (1.0 - a - b).max(0.0)]),
        }
    };
    let mut step = 1e-3;
    let steps = 1000i64;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=steps {
        let jmax = if n == 2 { 0 } else { steps - i };
        for j in 0..=jmax {
            let (a, b) = (i as f64 * step, j as f64 * step);
            if let Some(p) = point(a, b) {
                let v = f(&p);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
    }
    while step > 1e-9 {
        let centre = best;
        let fine = step / 10.0;
        let jr = if n == 2 { 0 } else { 10 };
        for i in -10i64..=10 {
            for j in -jr..=jr {
                let (a, b) = (centre.1 + i as f64 * fine, centre.2 + j as f64 * fine);
                if let Some(p) = point(a, b) {
                    let v = f(&p);
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
        }
        step = fine;
    }
    point(best.1, best.2).unwrap_or_else(|| vec![1.0 / n as f64; n])
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn projected_ascent(q: &[f64], u: &[f64], eta: f64) -> Vec<f64> {
    let n = q.len();
    let mut p = vec![1.0 / n as f64; n];
    let mut lr = 0.1 / eta.max(1e-3);
    for it in 0..200_000 {
        let g: Vec<f64> = (0..n).map(|i| u[i] - eta * ((p[i].max(1e-300) / q[i]).ln() + 1.0)).collect();
        let next = project_simplex(&p.iter().zip(&g).map(|(pi, gi)| pi + lr * gi).collect::<Vec<_>>());
        let moved = max_abs_diff(&next, &p);
        p = next;
        if moved < 1e-14 {
            break;
        }
        if it % 1000 == 999 {
            lr *= 0.7;
        }
    }
    p
}

/// Closed-form KL-proximal solution against an independent numeric maximizer:
/// lattice refinement for up to three candidates, projected gradient ascent beyond.
pub fn check_kl_proximal(q: &[f64], u: &[f64], eta: f64) -> Result<KlProximalCheck> {
    if q.len() != u.len() || q.is_empty() {
        return Err(Error::ShapeMismatch("kl proximal inputs".into()));
    }
    if !(eta > 0.0) || q.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::InvalidConfig("kl proximal check needs eta > 0 and q > 0".into()));
    }
    let closed_form = kl_proximal_solution(q, u, eta);
    let numeric = match q.len() {
        1 => vec![1.0],
        2 | 3 => simplex_grid_argmax(&|p| kl_proximal_objective(p, q, u, eta), q.len()),
        _ => projected_ascent(q, u, eta),
    };
    let tv_gap = total_variation(&closed_form, &numeric);
    Ok(KlProximalCheck { closed_form, numeric, tv_gap })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualClipCheck {
    pub samples: usize,
    pub min: f64,
    pub max: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub violations: usize,
}

/// Random sweep with log-uniform `ρ ∈ (1e-6, 1e6)` and uniform `Â ∈ [−A_max, A_max]`.
pub fn check_dual_clip_bounds(w: &ObjectiveWeights, samples: usize, seed: u64) -> DualClipCheck {
    let a_max = w.a_min.abs().max(w.a_max.abs());
    let lower_bound = -w.dual_clip_c * a_max;
    let upper_bound = (1.0 + w.eps_clip) * a_max;
    let mut rng = seeded_rng(seed, 0xd0a1);
    let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
    let mut out = DualClipCheck { samples, min: f64::INFINITY, max: f64::NEG_INFINITY, lower_bound, upper_bound, violations: 0 };
    for _ in 0..samples {
        let rho = rng.gen_range(lo..hi).exp();
        let a = rng.gen_range(-a_max..=a_max);
        let u = dual_clip_surrogate(rho, a, w);
        out.min = out.min.min(u);
        out.max = out.max.max(u);
        if !(lower_bound..=upper_bound).contains(&u) {
            out.violations += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    /// `‖ĝ − g‖₂`.
    pub gap: f64,
    /// `(E‖∇log π‖²)^½`.
    pub score_rms: f64,
    /// `(E|Δ̂ − Δ|²)^½`.
    pub residual_error_rms: f64,
    pub bound: f64,
}

/// Gradient bias of `Φ + Δ̂` against the real gradient, and its Cauchy–Schwarz bound.
pub fn check_bias_bound(
    mdp: &EnumerableMDP,
    policy: &TabularPolicy,
    proxy: &[f64],
    residual_hat: &[f64],
) -> Result<BiasCheck> {
    if proxy.len() != mdp.rewards.len() || residual_hat.len() != mdp.rewards.len() {
        return Err(Error::ShapeMismatch("proxy or residual table".into()));
    }
    let ev = solve_real_advantage(mdp, policy)?;
    let d = visitation_measure(mdp, policy)?;
    let u: Vec<f64> = proxy.iter().zip(residual_hat).map(|(p, r)| p + r).collect();
    let g_hat = score_expectation(policy, &d, &u);
    let g = score_expectation(policy, &d, &ev.advantages);
    let diff: Vec<f64> = g_hat.iter().zip(&g).map(|(a, b)| a - b).collect();
    let k = mdp.n_candidates;
    let (mut s2, mut e2) = (0.0, 0.0);
    for (s, ds) in d.iter().enumerate() {
        let pi = policy.probs(s);
        for a in 0..k {
            let i = s * k + a;
            let e = residual_hat[i] - (ev.advantages[i] - proxy[i]);
            let sc = l2(&policy.score(s, a));
            s2 += ds * pi[a] * sc * sc;
            e2 += ds * pi[a] * e * e;
        }
    }
    let (score_rms, residual_error_rms) = (s2.sqrt(), e2.sqrt());
    Ok(BiasCheck { gap: l2(&diff), score_rms, residual_error_rms, bound: score_rms * residual_error_rms })
}

/// Two-step problem for the Monte Carlo estimator comparison: pick a candidate
/// τ, then receive `Φ(τ) + Δ(τ) ± noise` with equal probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceInstance {
    pub phi: Vec<f64>,
    pub residual: Vec<f64>,
    pub logits: Vec<f64>,
    pub noise: f64,
}

impl RelevanceInstance {
    /// Builds the instance around the counterfactual group advantages of the
    /// valid candidates at decision `decision` of a pedestrian-crossing episode.
    /// The residual is a seeded per-candidate bias of size `residual_scale`.
    pub fn from_engine(lab: &LabConfig, seed: u64, decision: usize, residual_scale: f64, noise: f64) -> Result<Self> {
        let scenario = TemplateKind::PedestrianCrossing.scenario();
        let mut state = reset(&scenario, seed)?;
        for _ in 0..decision {
            let p = plan(&scenario, &state, lab)?;
            let keep = lab.vocab.mode_index(lab.vocab.lateral_offsets.len() / 2, 2.min(lab.vocab.target_speeds.len() - 1));
            let pick = if p.candidates.valid_mask[keep] { keep } else { p.candidates.valid_mask.iter().position(|v| *v).unwrap_or(0) };
            state = execute(&scenario, &state, &p, pick, lab, |_, _| {})?;
            if state.terminal.is_some() {
                return Err(Error::StepBeyondEpisode { step: decision, last: 0 });
            }
        }
        let p = plan(&scenario, &state, lab)?;
        let out = evaluate_group(&p.snapshot, &p.candidates, &lab.cf_reward, &lab.engine)?;
        let phi: Vec<f64> = out.advantages.iter().zip(&p.candidates.valid_mask).filter(|(_, v)| **v).map(|(a, _)| *a).collect();
        let mut rng = seeded_rng(seed, 0x5e1);
        let residual = phi.iter().map(|_| rng.gen_range(-residual_scale..=residual_scale)).collect();
        let logits = phi.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
        Ok(RelevanceInstance { phi, residual, logits, noise })
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Real advantage `Q(τ) − V`.
    pub fn real_advantage(&self) -> Vec<f64> {
        let pi = self.probs();
        let q: Vec<f64> = self.phi.iter().zip(&self.residual).map(|(a, b)| a + b).collect();
        let v: f64 = pi.iter().zip(&q).map(|(p, x)| p * x).sum();
        q.iter().map(|x| x - v).collect()
    }

    fn score(&self, pi: &[f64], a: usize) -> Vec<f64> {
        (0..pi.len()).map(|i| if i == a { 1.0 } else { 0.0 } - pi[i]).collect()
    }

    fn exact_gradient(&self, table: &[f64]) -> Vec<f64> {
        let pi = self.probs();
        let mut g = vec![0.0; pi.len()];
        for a in 0..pi.len() {
            for (gi, x) in g.iter_mut().zip(self.score(&pi, a)) {
                *gi += pi[a] * table[a] * x;
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCheck {
    pub candidates: usize,
    pub cov: f64,
    pub var_c: f64,
    /// `Cov[A, Φ] > Var[Φ] / 2` under the sampling policy.
    pub condition_holds: bool,
    /// Mean squared error of the plain score-function estimator.
    pub mse_plain: f64,
    /// Mean squared error of the exact-proxy plus sampled-residual estimator.
    pub mse_proxy_residual: f64,
    /// Paired z statistic of the error difference.
    pub z: f64,
}

/// Compares, at equal sample count and on paired samples, the plain estimator
/// `∇log π(τ) r` against `E_π[∇log π Φ] + ∇log π(τ)(r − Φ(τ))`.
pub fn check_mc_relevance(inst: &RelevanceInstance, samples: usize, repetitions: usize, seed: u64) -> Result<RelevanceCheck> {
    let n = inst.phi.len();
    if n < 2 || inst.residual.len() != n || inst.logits.len() != n || samples == 0 || repetitions < 2 {
        return Err(Error::ShapeMismatch("relevance instance".into()));
    }
    let pi = inst.probs();
    let adv = inst.real_advantage();
    let vc = check_variance_identity(&adv, &inst.phi, &pi, 1.0)?;
    let truth = inst.exact_gradient(&adv);
    let proxy_exact = inst.exact_gradient(&inst.phi);
    let mut rng = seeded_rng(seed, 0x3c);
    let mut diffs = Vec::with_capacity(repetitions);
    let (mut sum_plain, mut sum_pr) = (0.0, 0.0);
    for _ in 0..repetitions {
        let mut plain = vec![0.0; n];
        let mut pr = proxy_exact.clone();
        for _ in 0..samples {
            let x: f64 = rng.gen();
            let mut a = n - 1;
            let mut acc = 0.0;
            for (i, p) in pi.iter().enumerate() {
                acc += p;
                if x < acc {
                    a = i;
                    break;
                }
            }
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let r = inst.phi[a] + inst.residual[a] + sign * inst.noise;
            let sc = inst.score(&pi, a);
            for i in 0..n {
                plain[i] += sc[i] * r / samples as f64;
                pr[i] += sc[i] * (r - inst.phi[a]) / samples as f64;
            }
        }
        let e_plain: f64 = plain.iter().zip(&truth).map(|(x, t)| (x - t) * (x - t)).sum();
        let e_pr: f64 = pr.iter().zip(&truth).map(|(x, t)| (x - t) * (x - t)).sum();
        sum_plain += e_plain;
        sum_pr += e_pr;
        diffs.push(e_plain - e_pr);
    }
    let m = repetitions as f64;
    let mean = diffs.iter().sum::<f64>() / m;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0);
    let z = if var > 0.0 { mean / (var / m).sqrt() } else { f64::INFINITY * mean.signum() };
    Ok(RelevanceCheck {
        candidates: n,
        cov: vc.cov,
        var_c: vc.var_c,
        condition_holds: vc.reduction_predicted,
        mse_plain: sum_plain / m,
        mse_proxy_residual: sum_pr / m,
        z,
    })
}

/// One row of the theory battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub check: String,
    pub passed: bool,
    pub instances: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    /// One row per theoretical statement.
    pub rows: Vec<TheoryRow>,
    /// Checks that exercise the lab itself rather than a single statement.
    pub supplementary: Vec<TheoryRow>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().chain(&self.supplementary).all(|r| r.passed)
    }

    pub fn row(&self, check: &str) -> Option<&TheoryRow> {
        self.rows.iter().chain(&self.supplementary).find(|r| r.check == check)
    }
}

fn random_instance(seed: u64, i: u64) -> Result<(EnumerableMDP, TabularPolicy, rand_chacha::ChaCha8Rng)> {
    let mut rng = seeded_rng(mix_seed(seed, i), 0x7e0);
    let n_states = rng.gen_range(1..=50);
    let n_candidates = rng.gen_range(2..=5);
    let gamma = rng.gen_range(0.5..0.99);
    let mdp = EnumerableMDP::random(&mut rng, n_states, n_candidates, gamma)?;
    let dim = rng.gen_range(2..=6);
    let policy = TabularPolicy::random(&mut rng, n_states, n_candidates, dim);
    Ok((mdp, policy, rng))
}

pub fn run_decomposition_checks(seed: u64, instances: usize) -> Result<TheoryRow> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (mdp, policy, mut rng) = random_instance(seed, i as u64)?;
        let proxy: Vec<f64> = mdp.rewards.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        worst = worst.max(check_exact_decomposition(&mdp, &policy, &proxy)?.gap);
    }
    let tol = 1e-10;
    Ok(TheoryRow {
        check: "exact_decomposition".into(),
        passed: worst < tol,
        instances,
        worst,
        tolerance: tol,
        detail: format!("max |real gradient - (proxy + residual)| = {worst:.3e}"),
    })
}

pub fn run_variance_checks(seed: u64, instances: usize) -> Result<TheoryRow> {
    let tol = 1e-12;
    let (mut worst, mut sweep_failures, mut mispredicted) = (0.0f64, 0usize, 0usize);
    for i in 0..instances {
        let mut rng = seeded_rng(mix_seed(seed, i as u64), 0x7a2);
        let n = rng.gen_range(2..=10);
        let pi = softmax(&(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mix = rng.gen_range(-1.5..1.5);
        let y: Vec<f64> = c.iter().map(|ci| mix * ci + rng.gen_range(-1.0..1.0)).collect();
        let alpha = rng.gen_range(-3.0..3.0);
        let v = check_variance_identity(&y, &c, &pi, alpha)?;
        worst = worst.max((v.lhs - v.rhs).abs());
        let v_star = check_variance_identity(&y, &c, &pi, v.alpha_star)?.lhs;
        let centre = v.alpha_star;
        for k in 0..101 {
            let a = centre - 2.0 + 4.0 * k as f64 / 100.0;
            if check_variance_identity(&y, &c, &pi, a)?.lhs < v_star - 1e-12 {
                sweep_failures += 1;
            }
        }
        if v.reduction_predicted != v.reduction_observed {
            mispredicted += 1;
        }
    }
    Ok(TheoryRow {
        check: "variance_identity".into(),
        passed: worst < tol && sweep_failures == 0 && mispredicted == 0,
        instances,
        worst,
        tolerance: tol,
        detail: format!(
            "identity gap {worst:.3e}; sweep points below the minimizer {sweep_failures}; mispredicted reductions {mispredicted}"
        ),
    })
}

pub fn run_kl_proximal_checks(seed: u64, instances: usize) -> Result<TheoryRow> {
    let tol = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = seeded_rng(mix_seed(seed, i as u64), 0x41c);
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eta = rng.gen_range(0.2..2.0);
        worst = worst.max(check_kl_proximal(&q, &u, eta)?.tv_gap);
    }
    Ok(TheoryRow {
        check: "kl_proximal".into(),
        passed: worst < tol,
        instances,
        worst,
        tolerance: tol,
        detail: format!("max total variation between closed form and grid maximizer {worst:.3e}"),
    })
}

pub fn run_dual_clip_check(w: &ObjectiveWeights, samples: usize, seed: u64) -> TheoryRow {
    let c = check_dual_clip_bounds(w, samples, seed);
    TheoryRow {
        check: "dual_clip_bounds".into(),
        passed: c.violations == 0,
        instances: samples,
        worst: c.violations as f64,
        tolerance: 0.0,
        detail: format!(
            "observed [{:.4}, {:.4}] within [{}, {}], {} violations",
            c.min, c.max, c.lower_bound, c.upper_bound, c.violations
        ),
    }
}

pub fn run_bias_checks(seed: u64, instances: usize) -> Result<TheoryRow> {
    let (mut violations, mut worst_ratio) = (0usize, 0.0f64);
    for i in 0..instances {
        let (mdp, policy, mut rng) = random_instance(seed, i as u64)?;
        let proxy: Vec<f64> = mdp.rewards.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ev = solve_real_advantage(&mdp, &policy)?;
        let noise_scale = rng.gen_range(0.0..2.0);
        let residual_hat: Vec<f64> =
            ev.advantages.iter().zip(&proxy).map(|(a, p)| a - p + rng.gen_range(-noise_scale..=noise_scale)).collect();
        let b = check_bias_bound(&mdp, &policy, &proxy, &residual_hat)?;
        if b.gap > b.bound * (1.0 + 1e-12) + 1e-15 {
            violations += 1;
        }
        if b.bound > 0.0 {
            worst_ratio = worst_ratio.max(b.gap / b.bound);
        }
    }
    Ok(TheoryRow {
        check: "bias_bound".into(),
        passed: violations == 0,
        instances,
        worst: worst_ratio,
        tolerance: 1.0,
        detail: format!("{violations} violations; largest gap/bound ratio {worst_ratio:.3}"),
    })
}

pub fn run_relevance_check(lab: &LabConfig, seed: u64) -> Result<TheoryRow> {
    let inst = RelevanceInstance::from_engine(lab, seed, 4, 0.3, 1.0)?;
    let r = check_mc_relevance(&inst, 16, 2000, seed)?;
    Ok(TheoryRow {
        check: "mc_relevance".into(),
        passed: r.condition_holds && r.z > 3.0,
        instances: 2000,
        worst: r.z,
        tolerance: 3.0,
        detail: format!(
            "{} candidates, cov {:.3} vs var/2 {:.3}; mse plain {:.4} vs proxy+residual {:.4}, z = {:.1}",
            r.candidates,
            r.cov,
            0.5 * r.var_c,
            r.mse_plain,
            r.mse_proxy_residual,
            r.z
        ),
    })
}

/// Runs every check on `instances` seeded random problems.
pub fn run_theory_checks(lab: &LabConfig, seed: u64, instances: usize, dual_clip_samples: usize) -> Result<TheoryReport> {
    let rows = vec![
        run_decomposition_checks(seed, instances)?,
        run_variance_checks(seed, instances)?,
        run_kl_proximal_checks(seed, instances)?,
        run_dual_clip_check(&lab.objectives, dual_clip_samples, seed),
        run_bias_checks(seed, instances)?,
    ];
    Ok(TheoryReport { seed, rows, supplementary: vec![run_relevance_check(lab, seed)?] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit() -> (EnumerableMDP, TabularPolicy) {
        // one self-looping state, rewards (1, 0)
        let mdp = EnumerableMDP::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], 0.0, vec![1.0]).unwrap();
        let policy = TabularPolicy { n_states: 1, n_candidates: 2, dim: 2, features: vec![1.0, 0.0, 0.0, 1.0], theta: vec![0.0, 0.0] };
        (mdp, policy)
    }

    #[test]
    fn bandit_advantage() {
        let (mdp, policy) = bandit();
        let ev = solve_real_advantage(&mdp, &policy).unwrap();
        assert!((ev.advantages[0] - 0.5).abs() < 1e-15);
        assert!((ev.advantages[1] + 0.5).abs() < 1e-15);
        assert_eq!(visitation_measure(&mdp, &policy).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_rewards_zero_advantage() {
        let mut rng = seeded_rng(3, 0);
        let mut mdp = EnumerableMDP::random(&mut rng, 6, 3, 0.9).unwrap();
        mdp.rewards.iter_mut().for_each(|r| *r = 0.0);
        let policy = TabularPolicy::random(&mut rng, 6, 3, 4);
        assert!(solve_real_advantage(&mdp, &policy).unwrap().advantages.iter().all(|a| a.abs() < 1e-15));
    }

    #[test]
    fn advantages_average_to_zero_and_visitation_normalizes() {
        let mut rng = seeded_rng(4, 0);
        let mdp = EnumerableMDP::random(&mut rng, 20, 4, 0.95).unwrap();
        let policy = TabularPolicy::random(&mut rng, 20, 4, 3);
        let ev = solve_real_advantage(&mdp, &policy).unwrap();
        for s in 0..20 {
            let pi = policy.probs(s);
            let m: f64 = (0..4).map(|a| pi[a] * ev.advantages[s * 4 + a]).sum();
            assert!(m.abs() < 1e-10);
        }
        let d = visitation_measure(&mdp, &policy).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absorbing_state_visitation_is_a_point_mass() {
        // state 0 moves to the absorbing state 1 deterministically
        let mdp = EnumerableMDP::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 0.0], 0.9, vec![0.0, 1.0]).unwrap();
        let policy = TabularPolicy { n_states: 2, n_candidates: 1, dim: 1, features: vec![0.0, 0.0], theta: vec![0.0] };
        let d = visitation_measure(&mdp, &policy).unwrap();
        assert!((d[1] - 1.0).abs() < 1e-15 && d[0].abs() < 1e-15);
    }

    #[test]
    fn non_stochastic_kernel_is_rejected() {
        let r = EnumerableMDP::new(1, 1, vec![0.9], vec![0.0], 0.5, vec![1.0]);
        assert!(matches!(r, Err(Error::NonStochasticKernel { .. })));
    }

    #[test]
    fn real_gradient_matches_finite_differences_of_the_return() {
        let mut rng = seeded_rng(5, 0);
        let mdp = EnumerableMDP::random(&mut rng, 8, 3, 0.8).unwrap();
        let mut policy = TabularPolicy::random(&mut rng, 8, 3, 3);
        let zero = vec![0.0; mdp.rewards.len()];
        let lhs = check_exact_decomposition(&mdp, &policy, &zero).unwrap().lhs;
        for k in 0..3 {
            let h = 1e-6;
            policy.theta[k] += h;
            let up = objective_value(&mdp, &policy).unwrap();
            policy.theta[k] -= 2.0 * h;
            let down = objective_value(&mdp, &policy).unwrap();
            policy.theta[k] += h;
            let fd = (up - down) / (2.0 * h);
            // the visitation measure is normalized, so the true gradient carries 1/(1-γ)
            assert!((fd - lhs[k] / (1.0 - mdp.gamma)).abs() < 1e-7, "{fd} vs {}", lhs[k]);
        }
    }

    #[test]
    fn degenerate_and_perfect_proxies() {
        let mut rng = seeded_rng(6, 0);
        let mdp = EnumerableMDP::random(&mut rng, 10, 3, 0.9).unwrap();
        let policy = TabularPolicy::random(&mut rng, 10, 3, 3);
        let zero = check_exact_decomposition(&mdp, &policy, &vec![0.0; 30]).unwrap();
        assert!(zero.proxy_term.iter().all(|x| *x == 0.0));
        assert!(zero.gap < 1e-14);
        let ev = solve_real_advantage(&mdp, &policy).unwrap();
        let perfect = check_exact_decomposition(&mdp, &policy, &ev.advantages).unwrap();
        assert!(perfect.residual_term.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn variance_identity_examples() {
        let pi = [0.2, 0.5, 0.3];
        let c = [1.0, -1.0, 2.0];
        let same = check_variance_identity(&c, &c, &pi, 1.0).unwrap();
        assert!((same.alpha_star - 1.0).abs() < 1e-12 && same.lhs.abs() < 1e-15);
        // y orthogonal to c under uniform weights
        let u = [0.25; 4];
        let ind = check_variance_identity(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0], &u, 0.5).unwrap();
        assert!(ind.alpha_star.abs() < 1e-15);
        assert_eq!(check_variance_identity(&c, &[1.0; 3], &pi, 1.0), Err(Error::ZeroVariance));
    }

    #[test]
    fn kl_proximal_limits() {
        let q = [0.2, 0.3, 0.5];
        let flat = check_kl_proximal(&q, &[0.7; 3], 0.5).unwrap();
        assert!(total_variation(&flat.closed_form, &q) < 1e-15);
        assert!(flat.tv_gap < 1e-4);
        let stiff = kl_proximal_solution(&q, &[1.0, -1.0, 0.5], 1e6);
        assert!(total_variation(&stiff, &q) < 1e-4);
        let many = check_kl_proximal(&[0.1, 0.2, 0.3, 0.4], &[0.3, -0.2, 0.9, 0.0], 0.7).unwrap();
        assert!(many.tv_gap < 1e-4, "{}", many.tv_gap);
    }

    #[test]
    fn dual_clip_limits() {
        let w = ObjectiveWeights::default();
        for rho in [1e-6, 0.5, 1.0, 7.0, 1e6] {
            assert_eq!(dual_clip_surrogate(rho, 0.0, &w), 0.0);
        }
        assert_eq!(dual_clip_surrogate(1e6, -1.0, &w), -2.0);
        let c = check_dual_clip_bounds(&w, 10_000, 1);
        assert_eq!(c.violations, 0);
        assert_eq!((c.lower_bound, c.upper_bound), (-2.0, 1.2));
    }

    #[test]
    fn bias_bound_edge_cases() {
        let mut rng = seeded_rng(8, 0);
        let mdp = EnumerableMDP::random(&mut rng, 12, 4, 0.9).unwrap();
        let policy = TabularPolicy::random(&mut rng, 12, 4, 3);
        let proxy: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
        let ev = solve_real_advantage(&mdp, &policy).unwrap();
        let exact: Vec<f64> = ev.advantages.iter().zip(&proxy).map(|(a, p)| a - p).collect();
        let b = check_bias_bound(&mdp, &policy, &proxy, &exact).unwrap();
        assert!(b.gap < 1e-14 && b.residual_error_rms < 1e-14);
        let none = check_bias_bound(&mdp, &policy, &proxy, &vec![0.0; 48]).unwrap();
        let d = visitation_measure(&mdp, &policy).unwrap();
        let pure = l2(&score_expectation(&policy, &d, &exact));
        assert!((none.gap - pure).abs() < 1e-12);
        assert!(none.gap <= none.bound);
    }

    #[test]
    fn small_battery_passes() {
        assert!(run_decomposition_checks(1, 5).unwrap().passed);
        assert!(run_variance_checks(1, 5).unwrap().passed);
        assert!(run_bias_checks(1, 5).unwrap().passed);
    }
}
