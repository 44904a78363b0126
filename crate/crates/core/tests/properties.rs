use craftlab_core::counterfactual::group_advantages;
use craftlab_core::geometry::{box_gap, sat_overlap, transform_to_global, transform_to_local, OrientedBox, Pose2D, Vec2};
use craftlab_core::objectives::{corrective_advantage, dual_clip_surrogate, ObjectiveWeights};
use craftlab_core::optim::{clip_global_norm, lr_at};
use craftlab_core::policy::{ema_update, softmax_masked, PolicyParams, TeacherParams};
use craftlab_core::seeded_rng;
use craftlab_core::theory::{visitation_measure, EnumerableMDP, TabularPolicy};
use proptest::prelude::*;
use rand::Rng;

fn arb_box() -> impl Strategy<Value = OrientedBox> {
    (-20.0..20.0f64, -20.0..20.0f64, -3.2..3.2f64, 0.2..4.0f64, 0.2..2.0f64)
        .prop_map(|(x, y, yaw, hl, hw)| OrientedBox::new(Pose2D::new(x, y, yaw), hl, hw).unwrap())
}

proptest! {
    #[test]
    fn sat_is_symmetric_and_agrees_with_gap(a in arb_box(), b in arb_box()) {
        let ab = sat_overlap(&a, &b);
        prop_assert_eq!(ab, sat_overlap(&b, &a));
        let gap = box_gap(&a, &b);
        prop_assert!((gap - box_gap(&b, &a)).abs() < 1e-12);
        if ab {
            prop_assert_eq!(gap, 0.0);
        } else {
            prop_assert!(gap > 0.0);
        }
    }

    #[test]
    fn frame_transforms_round_trip(x in -50.0..50.0f64, y in -50.0..50.0f64, yaw in -3.2..3.2f64,
                                   px in -30.0..30.0f64, py in -30.0..30.0f64) {
        let pose = Pose2D::new(x, y, yaw);
        let back = transform_to_local(&transform_to_global(&[Vec2::new(px, py)], &pose), &pose);
        prop_assert!((back[0].x - px).abs() < 1e-9 && (back[0].y - py).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-30.0..30.0f64, 1..25), shift in -100.0..100.0f64) {
        let mask = vec![true; logits.len()];
        let a = softmax_masked(&logits, &mask, 1.0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let b = softmax_masked(&shifted, &mask, 1.0).unwrap();
        for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_advantages_are_centred(returns in prop::collection::vec(-100.0..100.0f64, 1..25), sigma_min in 0.1..10.0f64) {
        let mask = vec![true; returns.len()];
        let adv = group_advantages(&returns, &mask, sigma_min);
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
        // a permutation of the returns permutes the advantages
        let mut rev = returns.clone();
        rev.reverse();
        let mut adv_rev = group_advantages(&rev, &mask, sigma_min);
        adv_rev.reverse();
        for (a, b) in adv.iter().zip(&adv_rev) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_clip_stays_bounded(log_rho in -13.8..13.8f64, a in -1.0..1.0f64) {
        let u = dual_clip_surrogate(log_rho.exp(), a, &ObjectiveWeights::default());
        prop_assert!((-2.0..=1.2).contains(&u));
    }

    #[test]
    fn corrective_advantages_are_clipped(r in prop::collection::vec(-20.0..0.0f64, 1..40), cut in 0usize..40) {
        let done: Vec<bool> = (0..r.len()).map(|t| t != cut).collect();
        let w = ObjectiveWeights::default();
        let a = corrective_advantage(&r, &done, &w).unwrap();
        prop_assert!(a.iter().all(|x| (w.a_min..=w.a_max).contains(x) && *x <= 0.0));
    }

    #[test]
    fn clipping_never_exceeds_the_limit(a in prop::collection::vec(-50.0..50.0f64, 1..8),
                                         b in prop::collection::vec(-50.0..50.0f64, 1..8), max in 0.01..5.0f64) {
        let (mut a, mut b) = (a, b);
        let before = clip_global_norm(&mut [&mut a, &mut b], max);
        let after = a.iter().chain(&b).map(|x| x * x).sum::<f64>().sqrt();
        if before > max {
            prop_assert!((after - max).abs() < 1e-9);
        } else {
            prop_assert!((after - before).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_is_a_convex_combination(t in prop::collection::vec(-5.0..5.0f64, 7), o in prop::collection::vec(-5.0..5.0f64, 7), m in 0.0..1.0f64) {
        let next = ema_update(&TeacherParams { weights: t.clone() }, &PolicyParams { weights: o.clone(), version: 3 }, m);
        for i in 0..7 {
            let (lo, hi) = (t[i].min(o[i]), t[i].max(o[i]));
            prop_assert!(next.weights[i] >= lo - 1e-12 && next.weights[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn learning_rate_decays_monotonically(total in 1u32..200, r in 0u32..200) {
        let a = lr_at(r, total, 1e-4, 5e-6);
        let b = lr_at(r + 1, total, 1e-4, 5e-6);
        prop_assert!(b <= a + 1e-18);
        prop_assert!((5e-6 - 1e-18..=1e-4 + 1e-18).contains(&a));
    }
}

/// Exact visitation measure against a stopped-walk Monte Carlo estimate:
/// stopping with probability 1 − γ at each step samples states from d exactly.
#[test]
fn visitation_matches_monte_carlo() {
    let mut rng = seeded_rng(17, 0);
    let mdp = EnumerableMDP::random(&mut rng, 8, 3, 0.8).unwrap();
    let policy = TabularPolicy::random(&mut rng, 8, 3, 3);
    let exact = visitation_measure(&mdp, &policy).unwrap();
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, p: &[f64]| {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if x < acc {
                return i;
            }
        }
        p.len() - 1
    };
    let n = 1_000_000usize;
    let mut counts = [0usize; 8];
    let probs: Vec<Vec<f64>> = (0..8).map(|s| policy.probs(s)).collect();
    let rows: Vec<Vec<Vec<f64>>> =
        (0..8).map(|s| (0..3).map(|a| (0..8).map(|x| mdp.p(s, a, x)).collect()).collect()).collect();
    for _ in 0..n {
        let mut s = pick(&mut rng, &mdp.initial);
        while rng.gen::<f64>() < mdp.gamma {
            let a = pick(&mut rng, &probs[s]);
            s = pick(&mut rng, &rows[s][a]);
        }
        counts[s] += 1;
    }
    for s in 0..8 {
        let est = counts[s] as f64 / n as f64;
        let sd = (exact[s] * (1.0 - exact[s]) / n as f64).sqrt();
        assert!((est - exact[s]).abs() <= 3.0 * sd + 1e-12, "state {s}: exact {} vs estimate {est}", exact[s]);
    }
}
