use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlkws::features::FeatureMatrix;
use rlkws::metrics::EpisodeMetrics;
use rlkws::model::{act, predict, save_checkpoint, load_checkpoint_for, Architecture, ModelPair, PolicyParams};
use rlkws::rl::{
    self, discounted_returns, episode_gradients, train_episode, Agent, Environment,
    EpisodeHistory, RlConfig, RlError, TargetCache, WarmStart,
};
use rlkws::supervised::{Sample, TrainError};
use rlkws_nn::{Optimizer, Tensor};

fn tiny_arch(classes: usize) -> Architecture {
    Architecture {
        conv_filters: [3, 2],
        lstm_hidden: 4,
        dense: vec![6, 4],
        dropout: 0.0,
        input_scale: 0.1,
        ..Architecture::new(6, 4, classes)
    }
}

fn pool(n: usize, classes: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % classes;
            let v = (0..24)
                .map(|_| label as f32 * 4.0 - 2.0 + rng.random_range(-1.0f32..1.0))
                .collect();
            Sample {
                features: FeatureMatrix::new(6, 4, v).unwrap(),
                label,
            }
        })
        .collect()
}

fn config(eta: usize, episodes: usize, seed: u64) -> RlConfig {
    RlConfig {
        eta,
        num_episodes: episodes,
        sync_interval: 3,
        rl_lr: 1e-3,
        pretrain_epochs: 2,
        seed,
        record_wall_ms: false,
        rolling_window: 4,
        ..RlConfig::default()
    }
}

fn collect(cfg: &RlConfig, arch: &Architecture, warm: WarmStart<'_>, pool: &[Sample]) -> Vec<EpisodeMetrics> {
    let mut out = Vec::new();
    rl::run(cfg, arch, warm, pool, |m| {
        out.push(m.clone());
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn episode_walks_distinct_draws_to_the_boundary() {
    let data = pool(60, 2, 1);
    let mut env = Environment::new(&data, 50).unwrap();
    assert!(env.is_done());
    env.reset(&mut ChaCha8Rng::seed_from_u64(5));
    let drawn = env.drawn().to_vec();
    let mut sorted = drawn.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 50);

    let mut total = 0.0;
    for i in 0..50 {
        assert_eq!(env.cursor(), i);
        let (id, _) = env.current().unwrap();
        let step = env.step(data[id].label).unwrap();
        total += step.reward;
        assert_eq!(step.done, i == 49);
    }
    assert_eq!(total, 50.0);
    assert!(env.is_done() && env.current().is_none());
    assert!(matches!(env.step(0), Err(RlError::EpisodeDone)));

    let mut again = Environment::new(&data, 50).unwrap();
    again.reset(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(again.drawn(), drawn.as_slice());
    assert!(matches!(Environment::new(&data, 61), Err(RlError::PoolTooSmall { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn accuracy_identity_holds_for_random_episodes(
        pairs in proptest::collection::vec((0usize..30, 0usize..30), 1..80)
    ) {
        let mut h = EpisodeHistory::default();
        for (i, &(a, g)) in pairs.iter().enumerate() {
            h.push(i, a, rl::reward(a, g));
        }
        let eta = pairs.len() as f64;
        prop_assert_eq!(h.accuracy(), (h.reward_sum() + eta) / (2.0 * eta));
        prop_assert_eq!(h.correct() as f64, (h.reward_sum() + eta) / 2.0);
    }

    #[test]
    fn returns_are_bounded(rewards in proptest::collection::vec(prop_oneof![Just(1.0), Just(-1.0)], 1..60),
                           gamma in 0.0f64..=1.0) {
        let g = discounted_returns(&rewards, gamma);
        let n = rewards.len();
        for (t, v) in g.iter().enumerate() {
            let bound: f64 = (0..n - t).map(|k| gamma.powi(k as i32)).sum();
            prop_assert!(v.abs() <= bound + 1e-9);
        }
        prop_assert_eq!(g[n - 1], rewards[n - 1]);
    }
}

#[test]
fn logged_episodes_satisfy_the_accuracy_identity() {
    let data = pool(40, 3, 2);
    let cfg = RlConfig { rl_lr: 1e-2, ..config(7, 12, 3) };
    for m in collect(&cfg, &tiny_arch(3), WarmStart::None, &data) {
        assert_eq!(m.accuracy, (m.reward_sum + 7.0) / 14.0, "episode {}", m.episode);
        assert!((0.0..=1.0).contains(&m.accuracy));
    }
}

/// Head weights zero and a large bias on class 0: every output is exactly
/// `[1, tiny]` in f32, so with always-correct class-0 episodes and gamma 0
/// each return equals the target's own output for the taken action.
#[test]
fn consistent_targets_are_a_fixed_point() {
    let arch = tiny_arch(2);
    let n = arch.tensor_specs().len();
    let mut p = PolicyParams::<f32>::init(arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    p.tensors_mut()[n - 2].fill(0.0);
    p.tensors_mut()[n - 1].data_mut().copy_from_slice(&[100.0, 0.0]);
    let data: Vec<Sample> = pool(10, 2, 5).into_iter().filter(|s| s.label == 0).collect();
    let cfg = RlConfig { gamma: 0.0, ..config(3, 1, 0) };
    let mut h = EpisodeHistory::default();
    for (i, s) in data.iter().take(3).enumerate() {
        assert_eq!(predict(&p, &s.features).unwrap()[0], 1.0);
        h.push(i, 0, 1.0);
    }
    let mut pair = ModelPair::new(p.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cache = TargetCache::new();
    let (loss, grads) = episode_gradients(&pair, &data, &h, &cfg, &mut rng, &mut cache).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    let mut opt = Optimizer::adam(1e-3);
    train_episode(&mut pair, &mut opt, &data, &h, &cfg, &mut rng, &mut cache).unwrap();
    assert_eq!(pair.policy, p);
}

#[test]
fn single_step_loss_matches_hand_huber() {
    let arch = tiny_arch(2);
    let n = arch.tensor_specs().len();
    let mut p = PolicyParams::<f64>::init(arch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    p.tensors_mut()[n - 2].fill(0.0);
    p.tensors_mut()[n - 1].data_mut().copy_from_slice(&[0.0, 3f64.ln()]);
    let data = pool(2, 2, 7);
    // outputs [0.25, 0.75]; wrong action 1 on a class-0 state: G = -1,
    // target [0.25, -1], error 1.75 on one entry: 1.75 - 0.5, halved.
    let mut h = EpisodeHistory::default();
    h.push(0, 1, rl::reward(1, data[0].label));
    let cfg = config(1, 1, 0);
    let pair = ModelPair::new(p);
    let mut cache = TargetCache::new();
    let (loss, _) =
        episode_gradients(&pair, &data, &h, &cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut cache).unwrap();
    assert!((loss - 0.625).abs() < 1e-12, "{loss}");
}

#[test]
fn head_bias_gradient_matches_finite_differences() {
    let arch = Architecture { dropout: 0.3, ..tiny_arch(3) };
    let n = arch.tensor_specs().len();
    let data = pool(12, 3, 8);
    let cfg = RlConfig { gamma: 0.9, ..config(5, 1, 0) };
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PolicyParams::<f64>::init(arch.clone(), &mut rng).unwrap();
        let mut h = EpisodeHistory::default();
        for t in 0..5 {
            let a = rng.random_range(0..3);
            h.push(t * 2, a, rl::reward(a, data[t * 2].label));
        }
        let pair = ModelPair::new(p.clone());
        let loss_at = |bias: &[f64]| {
            let mut shifted = pair.clone();
            shifted.policy.tensors_mut()[n - 1].data_mut().copy_from_slice(bias);
            let mut cache = TargetCache::disabled();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(99 + seed);
            let (l, _) = episode_gradients(&shifted, &data, &h, &cfg, &mut drop_rng, &mut cache).unwrap();
            l
        };
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99 + seed);
        let (_, grads) =
            episode_gradients(&pair, &data, &h, &cfg, &mut drop_rng, &mut TargetCache::disabled()).unwrap();
        let bias = p.tensors()[n - 1].data().to_vec();
        for (i, &analytic) in grads[n - 1].data().iter().enumerate() {
            let step = 1e-6;
            let (mut up, mut down) = (bias.clone(), bias.clone());
            up[i] += step;
            down[i] -= step;
            let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * step);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(err <= 1e-3, "seed {seed} entry {i}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn incomplete_history_is_rejected() {
    let data = pool(10, 2, 9);
    let p = PolicyParams::<f32>::init(tiny_arch(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut h = EpisodeHistory::default();
    h.push(0, 0, 1.0);
    let err = episode_gradients(
        &ModelPair::new(p),
        &data,
        &h,
        &config(3, 1, 0),
        &mut ChaCha8Rng::seed_from_u64(0),
        &mut TargetCache::new(),
    )
    .unwrap_err();
    assert!(matches!(err, RlError::IncompleteHistory { len: 1, eta: 3 }));
}

#[test]
fn separable_pretraining_reaches_full_accuracy() {
    let arch = Architecture {
        dense: vec![16, 8],
        lstm_hidden: 8,
        ..Architecture::new(40, 32, 2)
    };
    let samples: Vec<Sample> = (0..80)
        .map(|i| Sample {
            features: FeatureMatrix::new(40, 32, vec![if i % 2 == 0 { -20.0 } else { 20.0 }; 1280]).unwrap(),
            label: i % 2,
        })
        .collect();
    let cfg = RlConfig { seed: 11, ..RlConfig::default() };
    let mut p = PolicyParams::<f32>::init(arch, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let report = rl::pretrain(&mut p, &samples, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 10);
    assert!(report.epochs.iter().all(|e| e.train_loss.is_finite()));
    // Epoch accuracy is taken with dropout active; judge the fitted model in inference mode.
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, accuracy) = rlkws::supervised::evaluate(&p, &refs).unwrap();
    assert_eq!(accuracy, 1.0);
    assert!(samples.iter().all(|s| act(&p, &s.features).unwrap() == s.label));

    let one_class: Vec<Sample> = samples.iter().filter(|s| s.label == 0).cloned().collect();
    assert!(matches!(
        rl::pretrain(&mut p, &one_class, &cfg),
        Err(RlError::Train(TrainError::MissingClass(1)))
    ));
}

#[test]
fn runs_are_deterministic_per_seed() {
    let data = pool(30, 2, 10);
    let arch = Architecture { dropout: 0.3, ..tiny_arch(2) };
    let a = collect(&config(5, 10, 21), &arch, WarmStart::None, &data);
    let b = collect(&config(5, 10, 21), &arch, WarmStart::None, &data);
    let c = collect(&config(5, 10, 22), &arch, WarmStart::None, &data);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 10);
    assert!(a.iter().all(|m| m.wall_ms == 0));
}

#[test]
fn rolling_columns_match_brute_force() {
    let data = pool(30, 2, 12);
    let cfg = RlConfig { rl_lr: 1e-2, ..config(5, 15, 13) };
    let ms = collect(&cfg, &tiny_arch(2), WarmStart::None, &data);
    for (i, m) in ms.iter().enumerate() {
        let lo = (i + 1).saturating_sub(cfg.rolling_window);
        let w: Vec<f64> = ms[lo..=i].iter().map(|m| m.accuracy).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((m.rolling_mean - mean).abs() < 1e-12);
        assert!((m.rolling_std - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn target_is_frozen_between_syncs() {
    let data = pool(30, 2, 14);
    let cfg = RlConfig { rl_lr: 1e-2, ..config(5, 1, 15) };
    let p = PolicyParams::init(tiny_arch(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut agent = Agent::new(p, cfg.clone()).unwrap();
    let mut env = Environment::new(&data, cfg.eta).unwrap();
    let mut draws = ChaCha8Rng::seed_from_u64(1);
    let mut frozen = agent.pair.target().clone();
    for episode in 1..=9 {
        env.reset(&mut draws);
        let h = agent.play_episode(&mut env).unwrap();
        agent.train(&data, &h).unwrap();
        assert_eq!(agent.pair.target(), &frozen, "episode {episode}");
        assert_ne!(agent.pair.policy, frozen);
        if episode % cfg.sync_interval == 0 {
            agent.pair.sync_target();
            assert_eq!(agent.pair.target(), &agent.pair.policy);
            frozen = agent.pair.target().clone();
        }
    }
}

#[test]
fn loaded_checkpoint_drives_the_first_episode() {
    let dir = tempfile::tempdir().unwrap();
    let data = pool(30, 3, 16);
    let arch = tiny_arch(3);
    let mut p = PolicyParams::<f32>::init(arch.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    rl::pretrain(&mut p, &data, &config(5, 1, 0)).unwrap();
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&p, &path).unwrap();
    let loaded = load_checkpoint_for(&path, &arch).unwrap();
    let mut agent = Agent::new(loaded.clone(), config(5, 1, 0)).unwrap();
    for s in &data {
        assert_eq!(predict(&agent.pair.policy, &s.features).unwrap(), predict(&p, &s.features).unwrap());
        assert_eq!(agent.choose(&s.features).unwrap(), act(&p, &s.features).unwrap());
    }
    let out = rl::run(&config(5, 0, 0), &arch, WarmStart::Params(loaded), &data, |_| Ok(())).unwrap();
    assert_eq!(out.final_params, p);
    let wrong = tiny_arch(2);
    assert!(rl::run(&config(5, 0, 0), &wrong, WarmStart::Params(p), &data, |_| Ok(())).is_err());
}

#[test]
fn sink_failures_stop_the_run() {
    let data = pool(30, 2, 17);
    let mut seen = 0;
    let err = rl::run(&config(5, 10, 0), &tiny_arch(2), WarmStart::None, &data, |m| {
        seen += 1;
        if m.episode == 3 { Err("disk full".into()) } else { Ok(()) }
    })
    .unwrap_err();
    assert_eq!(seen, 3);
    assert!(err.to_string().contains("disk full"));
}

#[test]
fn stub_pair_syncs_by_copy() {
    let mut pair = ModelPair::new(vec![Tensor::<f32>::vector(&[0.5, -1.0])]);
    let frozen = pair.target().clone();
    for step in 1..=10 {
        pair.policy[0].data_mut()[step % 2] += 0.25;
        assert_eq!(pair.target(), &frozen);
        let bits: Vec<u32> = pair.target()[0].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, vec![0.5f32.to_bits(), (-1.0f32).to_bits()]);
    }
    pair.sync_target();
    assert_eq!(pair.target(), &pair.policy);
}
