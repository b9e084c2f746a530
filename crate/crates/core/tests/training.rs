use stapo_core::domain::{Group, Prompt, TokenStep, Vocabulary};
use stapo_core::objectives::Objective;
use stapo_core::policy::{checkpoint, restore};
use stapo_core::tasks::{verify, ArithmeticTask};
use stapo_core::trainer::{train, StepMetrics, TrainConfig, TrainError, Trainer};

fn mod7() -> (Vec<Prompt>, Vocabulary) {
    let task: ArithmeticTask = "mod:7:2".parse().unwrap();
    (task.generate_prompts(32, 0), task.vocabulary())
}

fn short(objective: Objective, steps: u64) -> TrainConfig {
    TrainConfig { objective, total_steps: steps, batch_prompts: 16, ..Default::default() }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (prompts, vocab) = mod7();
    let cfg = short(Objective::Stapo, 25);
    let (p1, m1) = train(cfg, prompts.clone(), &vocab).unwrap();
    let (p2, m2) = train(cfg, prompts.clone(), &vocab).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(p1, p2);
    let (_, m3) = train(TrainConfig { seed: 1, ..cfg }, prompts, &vocab).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn worker_count_does_not_change_results() {
    let (prompts, vocab) = mod7();
    let cfg = short(Objective::Dapo, 15);
    let one = in_pool(1, || train(cfg, prompts.clone(), &vocab).unwrap());
    let four = in_pool(4, || train(cfg, prompts.clone(), &vocab).unwrap());
    assert_eq!(one, four);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let (prompts, vocab) = mod7();
    let cfg = short(Objective::Stapo, 30);
    let (_, full) = train(cfg, prompts.clone(), &vocab).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let mut first = Trainer::new(TrainConfig { total_steps: 12, ..cfg }, prompts.clone(), &vocab).unwrap();
    let mut head: Vec<StepMetrics> = Vec::new();
    first.run(|o| head.push(o.metrics.clone())).unwrap();
    checkpoint(first.policy(), first.completed_steps(), &path).unwrap();

    let (policy, step) = restore(&path).unwrap();
    assert_eq!(step, 12);
    let mut second = Trainer::resume(cfg, prompts, &vocab, policy, step).unwrap();
    second.run(|o| head.push(o.metrics.clone())).unwrap();
    assert_eq!(head, full);
}

#[test]
fn zero_tau_p_reproduces_dapo() {
    let (prompts, vocab) = mod7();
    let mut stapo = short(Objective::Stapo, 40);
    stapo.s2t.tau_p = 0.0;
    let (ps, ms) = train(stapo, prompts.clone(), &vocab).unwrap();
    let (pd, md) = train(short(Objective::Dapo, 40), prompts, &vocab).unwrap();
    assert_eq!(ps, pd);
    for (s, d) in ms.iter().zip(&md) {
        assert_eq!(s.masked_count, 0);
        assert_eq!(s.surrogate_value.to_bits(), d.surrogate_value.to_bits());
        assert_eq!(s.grad_norm.to_bits(), d.grad_norm.to_bits());
    }
}

#[test]
fn same_reward_groups_leave_policy_untouched() {
    let (prompts, vocab) = mod7();
    let mut trainer = Trainer::new(short(Objective::Dapo, 10), prompts, &vocab).unwrap();
    for _ in 0..5 {
        trainer.step().unwrap();
    }
    let before = trainer.policy().clone();
    let groups: Vec<Group> = trainer
        .rollout(6)
        .unwrap()
        .into_iter()
        .map(|g| {
            let trajectories = g.trajectories.into_iter().map(|mut t| {
                t.reward = 1.0;
                t
            });
            Group::new(g.prompt, trajectories.collect(), 1e-6).unwrap()
        })
        .collect();
    for objective in Objective::ALL {
        let mut t =
            Trainer::resume(short(objective, 10), trainer_prompts(), &vocab, before.clone(), 5).unwrap();
        let out = t.update(6, &groups).unwrap();
        assert_eq!(t.policy(), &before, "{objective}");
        assert!(t.policy().contexts().zip(before.contexts()).all(|((_, a), (_, b))| {
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }));
        assert_eq!(out.metrics.grad_norm, 0.0);
    }
}

fn trainer_prompts() -> Vec<Prompt> {
    mod7().0
}

#[test]
fn stapo_reward_improves_over_200_steps() {
    let (prompts, vocab) = mod7();
    let cfg = TrainConfig { objective: Objective::Stapo, total_steps: 200, seed: 0, ..Default::default() };
    let (_, m) = train(cfg, prompts, &vocab).unwrap();
    let window = |s: &[StepMetrics]| s.iter().map(|x| x.mean_reward).sum::<f64>() / s.len() as f64;
    let first = window(&m[..50]);
    let last = window(&m[150..]);
    assert!(last > first, "first {first} last {last}");
}

#[test]
fn spurious_ratio_matches_counts() {
    let (prompts, vocab) = mod7();
    let mut cfg = short(Objective::Stapo, 60);
    cfg.s2t.tau_p = 0.3;
    let mut t = Trainer::new(cfg, prompts, &vocab).unwrap().with_trace(true);
    let mut masked_total = 0;
    t.run(|o| {
        let m = &o.metrics;
        assert_eq!(m.spurious_ratio, m.masked_count as f64 / m.total_tokens as f64);
        assert_eq!(o.trace.len(), m.total_tokens);
        assert_eq!(o.masked_tokens.values().sum::<u64>() as usize, m.masked_count);
        assert_eq!(o.kept_tokens.values().sum::<u64>() as usize, m.total_tokens - m.masked_count);
        assert_eq!(m.cells.values().map(|c| c.count).sum::<usize>(), m.total_tokens);
        let spurious = m.cells.get(&stapo_core::s2t::PhaseCell::SPURIOUS.label()).map_or(0, |c| c.count);
        assert_eq!(spurious, m.masked_count);
        masked_total += m.masked_count;
    })
    .unwrap();
    assert!(masked_total > 0, "a loose threshold should mask something");
}

/// `tau_h` is one of the mini-batch entropies, so at least one token sits at
/// or above it and the quantile mask can never empty a mini-batch.
#[test]
fn quantile_mask_never_empties_a_mini_batch() {
    let (prompts, vocab) = mod7();
    let task: ArithmeticTask = "mod:7:2".parse().unwrap();
    let mut cfg = short(Objective::Stapo, 1);
    cfg.batch_prompts = 4;
    cfg.mini_batches_per_step = 1;
    cfg.s2t.tau_p = 0.99;
    cfg.s2t.entropy_quantile = 0.99;
    let fresh = Trainer::new(cfg, prompts.clone(), &vocab).unwrap();
    let rolled = fresh.rollout(1).unwrap();

    // first response position is peaked, the rest uniform
    let mut policy = fresh.policy().clone();
    for g in &rolled {
        let mut row = vec![0.0; vocab.size()];
        row[0] = 6.0;
        policy.set_logits(policy.context(&g.prompt.id, &[]), row).unwrap();
    }
    // every token carries a positive advantage
    let groups: Vec<Group> = rolled
        .into_iter()
        .map(|g| {
            let answer = task.reference_response(&g.prompt);
            let special = vocab.special();
            let trajectories = g
                .trajectories
                .into_iter()
                .map(|mut tr| {
                    tr.tokens = answer.clone();
                    tr.steps = answer.iter().map(|&tok| TokenStep::sampled(tok, 0.1, 0.0)).collect();
                    tr.reward = verify(&g.prompt, &tr.tokens, special);
                    tr
                })
                .collect();
            let mut g = Group::new(g.prompt, trajectories, 1e-6).unwrap();
            for tr in &mut g.trajectories {
                tr.advantage = 1.0;
            }
            g
        })
        .collect();
    let mut t = Trainer::resume(cfg, prompts, &vocab, policy.clone(), 0).unwrap();
    let out = t.update(1, &groups).unwrap();
    assert_eq!(out.metrics.skipped_updates, 0);
    assert_eq!(out.metrics.masked_count * 3, out.metrics.total_tokens);
    assert_ne!(t.policy(), &policy);
}

#[test]
fn non_finite_gradient_aborts_with_policy() {
    let (prompts, vocab) = mod7();
    let mut cfg = short(Objective::Dapo, 1);
    cfg.batch_prompts = 4;
    cfg.mini_batches_per_step = 1;
    let mut t = Trainer::new(cfg, prompts, &vocab).unwrap();
    let mut groups = t.rollout(1).unwrap();
    groups[0].trajectories[0].reward = -1.0;
    for tr in &mut groups[0].trajectories[1..] {
        tr.reward = 1.0;
    }
    let prompt = groups[0].prompt.clone();
    let mut trs = groups[0].trajectories.clone();
    trs[0].steps[0].old_prob = 0.0;
    groups[0] = Group::new(prompt, trs, 1e-6).unwrap();
    // a zero behaviour probability on a negative-advantage token makes the
    // unclipped weight infinite
    match t.update(1, &groups) {
        Err(TrainError::NonFinite { step, policy, .. }) => {
            assert_eq!(step, 1);
            assert_eq!(policy.num_contexts(), 0);
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (prompts, vocab) = mod7();
    let bad = TrainConfig { batch_prompts: 30, ..Default::default() };
    assert!(matches!(Trainer::new(bad, prompts.clone(), &vocab), Err(TrainError::Config(_))));
    assert!(matches!(Trainer::new(TrainConfig::default(), vec![], &vocab), Err(TrainError::NoPrompts)));
    let other: ArithmeticTask = "mod:11:2".parse().unwrap();
    let wide = other.generate_prompts(4, 0);
    assert!(matches!(Trainer::new(TrainConfig::default(), wide, &vocab), Err(TrainError::PromptVocabulary { .. })));
}
