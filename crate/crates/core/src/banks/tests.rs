use std::collections::BTreeSet;

use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> BenchmarkConfig {
    BenchmarkConfig {
        pools: PoolSizes {
            train: 40,
            context: 20,
            eval: 10,
        },
        adapter_dim: 16,
        ..BenchmarkConfig::default()
    }
}

#[test]
fn default_inventory() {
    let tasks = make_benchmark(&BenchmarkConfig::default()).unwrap();
    let suites: BTreeSet<&str> = tasks.iter().filter(|t| !t.is_auxiliary()).map(|t| t.suite.as_str()).collect();
    assert_eq!(suites, SUITES.iter().copied().collect());
    assert_eq!(tasks.iter().filter(|t| !t.is_auxiliary()).count(), 40);
    let aux: Vec<&TaskSpec> = tasks.iter().filter(|t| t.is_auxiliary()).collect();
    assert_eq!(aux.len(), 6);
    assert_eq!(aux.iter().filter(|t| t.suite == BIMANUAL).count(), 1);
    assert_eq!(aux.iter().filter(|t| t.suite.starts_with("side_view")).count(), 5);
    assert!(aux.iter().filter(|t| t.suite.starts_with("side_view")).all(|t| t.view_seed.is_some()));
    for t in &tasks {
        let dof = if t.suite == BIMANUAL { 14 } else { 7 };
        assert_eq!(t.dof, dof, "{}", t.suite);
    }
    let base = tasks.iter().find(|t| t.suite == "goal").unwrap().horizon;
    let long = tasks.iter().find(|t| t.suite == LONG_SUITE).unwrap().horizon;
    assert!(long * 2 >= base * 4 && long <= base * 3, "{base} {long}");
}

#[test]
fn same_seed_same_benchmark() {
    let a = Benchmark::new(small_config()).unwrap();
    let b = Benchmark::new(small_config()).unwrap();
    assert_eq!(a.tasks, b.tasks);
    for id in 0..a.tasks.len() {
        assert_eq!(a.policy(id), b.policy(id));
    }
    let other = Benchmark::new(BenchmarkConfig {
        seed: 8,
        ..small_config()
    })
    .unwrap();
    assert_ne!(a.policy(0), other.policy(0));
}

#[test]
fn episodes_are_deterministic_and_bounded() {
    let b = Benchmark::new(small_config()).unwrap();
    for task in [0usize, 35, 44, 45] {
        let e1 = b.episode(task, 17).unwrap();
        let e2 = b.episode(task, 17).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.actions.len(), b.task(task).n_tokens());
        assert_eq!(e1.tokens, tokenize_actions(&e1.actions, 32).unwrap());
        assert!(e1.actions.iter().all(|a| (-1.0..=1.0).contains(a)));
    }
}

#[test]
fn seeds_share_the_task_policy() {
    let b = Benchmark::new(small_config()).unwrap();
    let task = 12;
    let e1 = b.episode(task, 1).unwrap();
    let e2 = b.episode(task, 2).unwrap();
    assert_ne!(e1.observation, e2.observation);
    // In-domain cameras report the world state, so the policy can be
    // replayed on the recorded observations.
    let p = b.policy(task);
    assert_eq!(e1.actions, p.actions(&e1.observation));
    assert_eq!(e2.actions, p.actions(&e2.observation));
}

#[test]
fn side_view_rotates_observations() {
    let b = Benchmark::new(small_config()).unwrap();
    let side = b.tasks.iter().find(|t| t.view_seed.is_some()).unwrap().id;
    let p = b.policy(side);
    let d = b.task(side).obs_dim;
    let state: Vec<f64> = (0..d).map(|i| i as f64 - 1.5).collect();
    let seen = p.observe(&state);
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n(&seen) - n(&state)).abs() < 1e-10);
    assert_ne!(seen, state);
}

#[test]
fn variants_differ_along_their_suite_axis() {
    let b = Benchmark::new(small_config()).unwrap();
    let goal = b.suite_tasks("goal");
    let state = vec![0.3; b.config.obs_dim];
    assert_ne!(b.policy(goal[0]).actions(&state), b.policy(goal[1]).actions(&state));
    let object = b.suite_tasks("object");
    assert_ne!(b.task(object[0]).subspace, b.task(object[1]).subspace);
    let spatial = b.suite_tasks("spatial");
    // Same function, shifted state distribution.
    assert_eq!(b.policy(spatial[0]).actions(&state), b.policy(spatial[1]).actions(&state));
}

#[test]
fn pools_are_disjoint_and_sized() {
    let b = Benchmark::new(small_config()).unwrap();
    let banks = split_banks(&b, &ContextProtocol { bc: 4, k: 10, source: ContextSource::InDomainAux }).unwrap();
    assert_eq!(banks.target.suites.len(), 4);
    let mut target_ids = BTreeSet::new();
    for s in &banks.target.suites {
        assert_eq!(s.train.episodes.len(), 40);
        assert_eq!(s.eval.episodes.len(), 10);
        target_ids.extend(s.train.ids());
        target_ids.extend(s.eval.ids());
        assert!(s.train.episodes.iter().all(|e| !b.task(e.task).is_auxiliary()));
    }
    assert_eq!(banks.context.n_tasks(), 10);
    for pool in &banks.context.pools {
        assert_eq!(pool.episodes.len(), 20);
        let ids: BTreeSet<_> = pool.ids().collect();
        assert!(ids.is_disjoint(&target_ids));
    }
    let aux: BTreeSet<usize> = b.auxiliary_tasks().into_iter().collect();
    let context_tasks: BTreeSet<usize> = banks.context.pools.iter().flat_map(|p| p.episodes.iter().map(|e| e.task)).collect();
    assert!(aux.is_subset(&context_tasks));
    assert!(target_ids.iter().all(|id| !aux.contains(&id.task)));
    for id in &target_ids {
        assert_ne!(PoolKind::of_seed(id.seed), Some(PoolKind::Context));
    }
}

#[test]
fn overlapping_pools_are_rejected() {
    let b = Benchmark::new(small_config()).unwrap();
    let mut banks = split_banks(&b, &ContextProtocol { bc: 4, k: 10, source: ContextSource::InDomain }).unwrap();
    banks.context.pools[0].episodes.push(banks.target.suites[0].eval.episodes[0].clone());
    assert!(matches!(banks.audit_disjoint(), Err(Error::Protocol(_))));

    let mut banks = split_banks(&b, &ContextProtocol { bc: 4, k: 10, source: ContextSource::InDomain }).unwrap();
    banks.context.pools[1].episodes.push(banks.target.suites[1].train.episodes[3].clone());
    assert!(banks.audit_disjoint().is_err());
}

#[test]
fn context_sources() {
    let b = Benchmark::new(small_config()).unwrap();
    let p = |source| ContextProtocol { bc: 4, k: 10, source };
    let no_aux = split_banks(&b, &p(ContextSource::InDomain)).unwrap();
    assert_eq!(no_aux.context.n_tasks(), 4);
    assert!(no_aux.context.pools.iter().all(|p| p.kind == PoolKind::Context));
    let stale = split_banks(&b, &p(ContextSource::Stale)).unwrap();
    assert!(stale.context.pools.iter().all(|p| p.kind == PoolKind::Train));
    assert_eq!(stale.context.pools[2].episodes, stale.target.suites[2].train.episodes);
}

#[test]
fn oversized_context_batch_rejected() {
    let b = Benchmark::new(small_config()).unwrap();
    let r = split_banks(&b, &ContextProtocol { bc: 21, k: 10, source: ContextSource::InDomain });
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn refresh_fires_exactly_on_schedule() {
    let b = Benchmark::new(small_config()).unwrap();
    let mut banks = split_banks(&b, &ContextProtocol { bc: 8, k: 200, source: ContextSource::InDomainAux }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fired = Vec::new();
    let mut prev: Option<Vec<EpisodeId>> = None;
    for step in 0..1000u64 {
        let did = banks.context.refresh_context(step, &mut rng);
        let now = banks.context.active_ids();
        if did {
            fired.push(step);
        } else {
            assert_eq!(Some(&now), prev.as_ref(), "active set changed at step {step}");
        }
        assert_eq!(now.len(), 8 * 10);
        prev = Some(now);
    }
    assert_eq!(fired, vec![0, 200, 400, 600, 800]);
    assert_eq!(banks.context.refreshes(), 5);
    let tasks = banks.context.active_tasks();
    for t in 0..10 {
        assert_eq!(tasks.iter().filter(|&&x| x == t).count(), 8);
    }
    // Without replacement inside each task.
    let ids: BTreeSet<_> = prev.unwrap().into_iter().collect();
    assert_eq!(ids.len(), 80);
}

#[test]
fn suite_mix_is_uniform() {
    let b = Benchmark::new(small_config()).unwrap();
    let banks = split_banks(&b, &ContextProtocol { bc: 4, k: 10, source: ContextSource::InDomain }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 4];
    for _ in 0..100 {
        for e in sample_target_batch(&banks.target, 128, &mut rng, TargetMix::AllSuites).unwrap() {
            counts[e.task / 10] += 1;
        }
    }
    let expected = 100.0 * 128.0 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 1% point of chi-square with 3 degrees of freedom.
    assert!(chi2 < 11.3449, "{chi2} {counts:?}");
}

#[test]
fn single_suite_and_determinism() {
    let b = Benchmark::new(small_config()).unwrap();
    let banks = split_banks(&b, &ContextProtocol { bc: 4, k: 10, source: ContextSource::InDomain }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = sample_target_batch(&banks.target, 64, &mut rng, TargetMix::Suite(2)).unwrap();
    assert!(batch.iter().all(|e| b.task(e.task).suite == "object"));

    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .flat_map(|_| sample_target_batch(&banks.target, 16, &mut rng, TargetMix::AllSuites).unwrap())
            .map(Episode::id)
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
    assert!(sample_target_batch(&banks.target, 0, &mut rng, TargetMix::AllSuites).is_err());
}

#[test]
fn auxiliary_mixing_rate() {
    let b = Benchmark::new(small_config()).unwrap();
    let banks = split_banks(&b, &ContextProtocol { bc: 4, k: 10, source: ContextSource::InDomain }).unwrap();
    let mix = TargetMix::WithAuxiliary {
        pools: &banks.auxiliary,
        aux_weight: 1.0,
    };
    let p = mix.auxiliary_probability(4);
    assert!((p - 0.6).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut aux, mut total) = (0usize, 0usize);
    for _ in 0..1000 {
        for e in sample_target_batch(&banks.target, 32, &mut rng, mix).unwrap() {
            aux += b.task(e.task).is_auxiliary() as usize;
            total += 1;
        }
    }
    let n = total as f64;
    let freq = aux as f64 / n;
    assert!((freq - p).abs() <= 4.0 * (p * (1.0 - p) / n).sqrt(), "{freq}");
}

#[test]
fn benchmark_document_round_trips() {
    let doc = BenchmarkDoc::generate(small_config()).unwrap();
    let text = doc.to_toml().unwrap();
    let back = BenchmarkDoc::from_toml(&text).unwrap();
    assert_eq!(back, doc);
    let built = back.build().unwrap();
    assert_eq!(built.tasks, Benchmark::new(small_config()).unwrap().tasks);

    let only_config = "[config]\nseed = 3\n";
    let doc = BenchmarkDoc::from_toml(only_config).unwrap();
    assert_eq!(doc.config.seed, 3);
    assert_eq!(doc.build().unwrap().tasks.len(), 46);

    assert!(BenchmarkDoc::from_toml("[config]\nvocab_size = 1\n").is_err());
    assert!(BenchmarkDoc::from_toml("[config]\nbogus = 1\n").is_err());
}

#[test]
fn adapters_map_to_decoder_width() {
    let b = Benchmark::new(small_config()).unwrap();
    let e = b.episode(45, 0).unwrap();
    let t = b.tokens(&e);
    assert_eq!(t.observation.len(), 16);
    assert_eq!(t.actions.len(), 28);
    assert!(b.max_positions() >= 30);
}
