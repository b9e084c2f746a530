use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stapo_core::analysis::random::{random_case, random_mask, RandomCaseShape};
use stapo_core::domain::{ClipState, Prompt, TokenStep, Trajectory};
use stapo_core::objectives::{
    group_advantages, surrogate_gradient, surrogate_value, token_ratio_and_clipstate, ClipConfig, Objective,
};
use stapo_core::policy::{shannon_entropy, ContextKey, PolicyTable};
use stapo_core::s2t::{classify_phase, resolve_tau_h, s2t_keep, PhaseCell, Thresholds};

fn binary_rewards(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), 2..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn advantages_are_standardized(rewards in binary_rewards(32)) {
        let adv = group_advantages(&rewards, 1e-6).unwrap();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 1e-6 {
            let m = adv.iter().sum::<f64>() / n;
            let s = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-12);
            prop_assert!((s - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn trajectory_json_round_trip(
        tokens in prop::collection::vec(0u32..64, 1..20),
        probs in prop::collection::vec(1e-9f64..=1.0, 20),
        reward in prop::bool::ANY,
        advantage in -5.0f64..5.0,
    ) {
        let steps: Vec<TokenStep> = tokens
            .iter()
            .zip(&probs)
            .map(|(&t, &p)| TokenStep::sampled(t, p, -p.ln()))
            .collect();
        let traj = Trajectory {
            prompt_id: "p-1".into(),
            tokens: tokens.clone(),
            steps,
            reward: if reward { 1.0 } else { -1.0 },
            advantage,
        };
        let text = serde_json::to_string(&traj).unwrap();
        let back: Trajectory = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, traj);
    }

    #[test]
    fn prompt_json_round_trip(
        id in "[a-z0-9-]{1,12}",
        tokens in prop::collection::vec(0u32..20, 1..10),
        answer in prop::collection::vec(0u32..10, 1..3),
    ) {
        let p = Prompt::new(id, tokens, answer).unwrap();
        let back: Prompt = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 7), 1..6),
    ) {
        let mut p = PolicyTable::new(7, 2);
        for (i, row) in rows.into_iter().enumerate() {
            p.set_logits(ContextKey::new(&format!("q{i}"), &[1, 2], 2), row).unwrap();
        }
        let text = serde_json::to_string(&p.to_checkpoint(3)).unwrap();
        let back = PolicyTable::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        for (ctx, row) in p.contexts() {
            let restored = back.logits(ctx);
            prop_assert!(row.iter().zip(&restored).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(p.distribution(ctx), back.distribution(ctx));
        }
    }

    #[test]
    fn distribution_is_normalized(logits in prop::collection::vec(-40.0f64..40.0, 2..128)) {
        let mut p = PolicyTable::new(logits.len(), 1);
        let ctx = ContextKey::new("x", &[], 1);
        p.set_logits(ctx.clone(), logits.clone()).unwrap();
        let pi = p.distribution(&ctx);
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pi.iter().all(|&x| x > 0.0));
        prop_assert!(shannon_entropy(&pi) <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn token_gradients_sum_to_zero(seed in any::<u64>(), objective in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, &RandomCaseShape::default());
        let objective = Objective::ALL[objective];
        let mask = vec![true; case.batch.len()];
        let g = surrogate_gradient(&case.policy, objective, &case.batch, &mask, &ClipConfig::default()).unwrap();
        for (tg, r) in g.tokens.iter().zip(case.batch.records()) {
            prop_assert!(tg.vector.iter().sum::<f64>().abs() < 1e-12);
            let clipped_out = matches!(
                (tg.clip_state, r.advantage > 0.0),
                (ClipState::ClippedHigh, true) | (ClipState::ClippedLow, false)
            );
            prop_assert_eq!(tg.weight == 0.0, clipped_out);
        }
        for row in g.grads.values() {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_is_current_over_old(old in 1e-8f64..=1.0, cur in 1e-8f64..=1.0, adv in -3.0f64..3.0) {
        let (ratio, _) = token_ratio_and_clipstate(old, cur, adv, &ClipConfig::default());
        prop_assert!((ratio - cur / old).abs() <= 1e-12 * (cur / old));
    }

    #[test]
    fn masked_tokens_have_no_influence(seed in any::<u64>(), drop in 0.05f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, &RandomCaseShape::default());
        let mask = random_mask(&mut rng, case.batch.len(), drop);
        let clip = ClipConfig::default();
        let full = surrogate_gradient(&case.policy, Objective::Stapo, &case.batch, &mask, &clip).unwrap();
        let kept = case.batch.retain_by(&mask);
        let ones = vec![true; kept.len()];
        let pruned = surrogate_gradient(&case.policy, Objective::Stapo, &kept, &ones, &clip).unwrap();
        prop_assert_eq!(full.value.to_bits(), pruned.value.to_bits());
        prop_assert_eq!(&full.grads, &pruned.grads);
        let mut a = case.policy.clone();
        let mut b = case.policy.clone();
        a.apply_gradient(&full.grads, 0.5, 1.0).unwrap();
        b.apply_gradient(&pruned.grads, 0.5, 1.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn unmasked_stapo_equals_dapo(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, &RandomCaseShape::default());
        let ones = vec![true; case.batch.len()];
        let clip = ClipConfig::default();
        let s = surrogate_gradient(&case.policy, Objective::Stapo, &case.batch, &ones, &clip).unwrap();
        let d = surrogate_gradient(&case.policy, Objective::Dapo, &case.batch, &ones, &clip).unwrap();
        prop_assert_eq!(s.value.to_bits(), d.value.to_bits());
        prop_assert_eq!(&s.grads, &d.grads);
        // direct token-mean recomputation
        let clip = clip.for_objective(Objective::Dapo);
        let direct: f64 = case
            .batch
            .records()
            .iter()
            .map(|r| {
                let rho = case.policy.distribution(&r.context)[r.token as usize] / r.old_prob;
                let clipped = rho.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
                (rho * r.advantage).min(clipped * r.advantage)
            })
            .sum::<f64>()
            / case.batch.len() as f64;
        let v = surrogate_value(&case.policy, Objective::Dapo, &case.batch, &ones, &ClipConfig::default()).unwrap();
        prop_assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn tau_h_is_a_nearest_rank_quantile(
        xs in prop::collection::vec(0.0f64..5.0, 1..200),
        q in 0.01f64..0.99,
    ) {
        let t = resolve_tau_h(&xs, q).unwrap();
        let at_or_below = xs.iter().filter(|&&x| x <= t).count() as f64;
        let below = xs.iter().filter(|&&x| x < t).count() as f64;
        let n = xs.len() as f64;
        prop_assert!(xs.contains(&t));
        prop_assert!(at_or_below >= q * n - 1e-9);
        prop_assert!(below < q * n + 1e-9);
    }

    #[test]
    fn masked_count_grows_with_tau_p(
        rows in prop::collection::vec((0.0f64..1.0, 0.0f64..3.0, -2.0f64..2.0), 1..200),
        a in 0.0f64..0.5,
        b in 0.0f64..0.5,
        tau_h in 0.0f64..3.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let masked = |tau_p: f64| {
            let th = Thresholds { tau_p, tau_h };
            rows.iter().filter(|&&(p, h, adv)| !s2t_keep(p, h, adv, &th)).count()
        };
        prop_assert!(masked(lo) <= masked(hi));
        prop_assert_eq!(masked(0.0), 0);
    }

    #[test]
    fn every_triple_lands_in_one_cell(p in 0.0f64..1.0, h in 0.0f64..3.0, adv in -2.0f64..2.0, tau_h in 0.0f64..3.0) {
        let th = Thresholds { tau_p: 0.002, tau_h };
        let cell = classify_phase(p, h, adv, &th);
        prop_assert_eq!(PhaseCell::all().iter().filter(|&&c| c == cell).count(), 1);
        prop_assert_eq!(cell.is_spurious(), !s2t_keep(p, h, adv, &th));
    }
}
