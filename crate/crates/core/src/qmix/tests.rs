use rand::Rng;

use super::*;
use crate::env::Scenario;
use crate::nn::Activation;
use crate::policies::{idqn_loss, PolicyTag};
use crate::traffic::TrafficConfig;
use crate::{seeded_rng, SimRng};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random_vec(rng: &mut SimRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn learner(n: usize, m: usize, shared: bool, with_mixer: bool, rng: &mut SimRng) -> Learner {
    let w = m + 2;
    Learner {
        agents: AgentSet::new(n, m, 6, shared, rng),
        mixer: with_mixer.then(|| MixerNet::new(n, n * w, 5, rng)),
    }
}

fn random_batch(n: usize, m: usize, len: usize, rng: &mut SimRng) -> Vec<Transition> {
    let w = m + 2;
    (0..len)
        .map(|_| Transition {
            obs: random_vec(rng, n * w, 1.5),
            actions: (0..n).map(|_| rng.gen_range(0..m)).collect(),
            reward: rng.gen(),
            agent_rewards: (0..n).map(|_| rng.gen()).collect(),
            next_obs: random_vec(rng, n * w, 1.5),
        })
        .collect()
}

#[test]
fn zero_q_leaves_only_state_bias() {
    let mut rng = seeded_rng(0, 0);
    let mix = MixerNet::new(3, 12, 4, &mut rng);
    let g = random_vec(&mut rng, 12, 1.0);
    let (_, w2) = mix.effective_weights(&g);
    let b1: Vec<f64> = (0..4)
        .map(|k| {
            let row = &mix.hyper_b1.weights[k * 12..(k + 1) * 12];
            row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() + mix.hyper_b1.bias[k]
        })
        .collect();
    let b2 = mix.hyper_b2.weights.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() + mix.hyper_b2.bias[0];
    let expected = b1
        .iter()
        .zip(&w2)
        .map(|(&z, w)| Activation::Elu.apply(z) * w)
        .sum::<f64>()
        + b2;
    assert!((mix.q_tot(&[0.0; 3], &g) - expected).abs() < 1e-12);
}

#[test]
fn mixer_is_monotone() {
    let mut rng = seeded_rng(1, 0);
    for _ in 0..200 {
        let mix = MixerNet::new(4, 8, 6, &mut rng);
        let g = random_vec(&mut rng, 8, 3.0);
        let q = random_vec(&mut rng, 4, 5.0);
        let base = mix.q_tot(&q, &g);
        let (w1, w2) = mix.effective_weights(&g);
        assert!(w1.iter().chain(&w2).all(|&w| w >= 0.0));
        for i in 0..4 {
            let mut up = q.clone();
            up[i] += 1e-3;
            assert!(mix.q_tot(&up, &g) >= base);
        }
    }
}

#[test]
fn greedy_action_examples() {
    let mut rng = seeded_rng(2, 0);
    let mut agents = AgentSet::new(2, 2, 3, false, &mut rng);
    // Zero every weight so each net outputs its output-layer bias.
    for (net, bias) in agents.networks.iter_mut().zip([[1.0, 0.0], [0.0, 1.0]]) {
        for l in &mut net.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        net.layers.last_mut().unwrap().bias.copy_from_slice(&bias);
    }
    let (actions, values) = greedy_joint_action(&agents, &[0.3; 8], 2);
    assert_eq!(actions, vec![0, 1]);
    assert_eq!(values, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

    agents.networks[0]
        .layers
        .last_mut()
        .unwrap()
        .bias
        .copy_from_slice(&[0.5, 0.5]);
    assert_eq!(greedy_joint_action(&agents, &[0.3; 8], 2).0[0], 0);
}

#[test]
fn per_agent_argmax_maximizes_q_tot() {
    let mut rng = seeded_rng(3, 0);
    for _ in 0..50 {
        let l = learner(3, 2, false, true, &mut rng);
        let mix = l.mixer.as_ref().unwrap();
        let z = random_vec(&mut rng, 12, 2.0);
        let (actions, values) = greedy_joint_action(&l.agents, &z, 3);
        let pick = |a: &[usize]| -> Vec<f64> { a.iter().zip(&values).map(|(&u, q)| q[u]).collect() };
        let greedy = mix.q_tot(&pick(&actions), &z);
        let mut best = f64::NEG_INFINITY;
        for code in 0..8usize {
            let joint: Vec<usize> = (0..3).map(|i| (code >> i) & 1).collect();
            best = best.max(mix.q_tot(&pick(&joint), &z));
        }
        assert!((greedy - best).abs() <= 1e-12);
    }
}

#[test]
fn epsilon_extremes() {
    let mut rng = seeded_rng(4, 0);
    let greedy = vec![1, 0, 2, 1];
    assert_eq!(epsilon_greedy(&greedy, 0.0, 3, &mut rng), greedy);
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        counts[epsilon_greedy(&[2], 1.0, 3, &mut rng)[0]] += 1;
    }
    let sigma = (100_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in counts {
        assert!((c as f64 - 100_000.0 / 3.0).abs() < 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn mixer_gradients_match_finite_differences() {
    let mut rng = seeded_rng(5, 0);
    let h = 1e-5;
    for _ in 0..10 {
        let mix = MixerNet::new(3, 6, 4, &mut rng);
        let q = random_vec(&mut rng, 3, 2.0);
        let g = random_vec(&mut rng, 6, 2.0);
        let (_, cache) = mix.forward(&q, &g);
        let mut grads = MixerGrad::zeros_like(&mix);
        let dq = mix.backward(&cache, &g, 1.0, &mut grads);
        let analytic = grads.slices();
        let mut probe = mix.clone();
        for t in 0..analytic.len() {
            for k in 0..analytic[t].len() {
                let orig = probe.param_slices()[t][k];
                probe.param_slices_mut()[t][k] = orig + h;
                let up = probe.q_tot(&q, &g);
                probe.param_slices_mut()[t][k] = orig - h;
                let down = probe.q_tot(&q, &g);
                probe.param_slices_mut()[t][k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel_err(fd, analytic[t][k]) < 1e-4,
                    "tensor {t}[{k}]: {fd} vs {}",
                    analytic[t][k]
                );
            }
        }
        for i in 0..3 {
            let mut qp = q.clone();
            qp[i] += h;
            let mut qm = q.clone();
            qm[i] -= h;
            let fd = (mix.q_tot(&qp, &g) - mix.q_tot(&qm, &g)) / (2.0 * h);
            assert!(rel_err(fd, dq[i]) < 1e-4);
            assert!(dq[i] >= 0.0);
        }
    }
}

fn check_loss_gradients<F>(l: &Learner, batch: &[Transition], loss_fn: F)
where
    F: Fn(&Learner) -> (f64, LearnerGrads),
{
    let h = 1e-5;
    let (_, grads) = loss_fn(l);
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut probe = l.clone();
    assert!(!batch.is_empty());
    for (t, tensor) in analytic.iter().enumerate() {
        for (k, &a) in tensor.iter().enumerate() {
            let orig = probe.param_slices()[t][k];
            probe.param_slices_mut()[t][k] = orig + h;
            let up = loss_fn(&probe).0;
            probe.param_slices_mut()[t][k] = orig - h;
            let down = loss_fn(&probe).0;
            probe.param_slices_mut()[t][k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, a) < 1e-4, "tensor {t}[{k}]: fd {fd} vs {a}");
        }
    }
}

#[test]
fn qmix_loss_gradients_match_finite_differences() {
    let mut rng = seeded_rng(6, 0);
    for (shared, gamma) in [(false, 0.0), (true, 0.0), (false, 0.7)] {
        let l = learner(3, 2, shared, true, &mut rng);
        let target = learner(3, 2, shared, true, &mut rng);
        let batch = random_batch(3, 2, 4, &mut rng);
        check_loss_gradients(&l, &batch, |p| qmix_loss(p, &target, &batch, gamma));
    }
}

#[test]
fn idqn_loss_gradients_match_finite_differences() {
    let mut rng = seeded_rng(7, 0);
    for (shared, gamma) in [(false, 0.0), (true, 0.5)] {
        let l = learner(3, 2, shared, false, &mut rng);
        let target = learner(3, 2, shared, false, &mut rng);
        let batch = random_batch(3, 2, 4, &mut rng);
        check_loss_gradients(&l, &batch, |p| idqn_loss(p, &target, &batch, gamma));
    }
}

#[test]
fn zero_gamma_target_is_the_reward() {
    let mut rng = seeded_rng(8, 0);
    let batch = random_batch(3, 2, 16, &mut rng);
    let a = learner(3, 2, false, true, &mut rng);
    let mut b = learner(3, 2, false, true, &mut rng);
    for p in b.param_slices_mut() {
        p.fill(1e6);
    }
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    assert_eq!(qmix_targets(&batch, &a, 0.0), rewards);
    assert_eq!(qmix_targets(&batch, &b, 0.0), rewards);
    let online = learner(3, 2, false, true, &mut rng);
    assert_eq!(qmix_loss(&online, &a, &batch, 0.0), qmix_loss(&online, &b, &batch, 0.0));
}

#[test]
fn perfect_fit_has_zero_loss() {
    let mut rng = seeded_rng(9, 0);
    let l = learner(2, 2, false, true, &mut rng);
    let mut batch = random_batch(2, 2, 3, &mut rng);
    let mix = l.mixer.as_ref().unwrap();
    for t in &mut batch {
        let q: Vec<f64> = (0..2)
            .map(|i| l.agents.net(i).predict(&t.obs[i * 4..(i + 1) * 4])[t.actions[i]])
            .collect();
        t.reward = mix.q_tot(&q, &t.obs);
    }
    let (loss, grads) = qmix_loss(&l, &l, &batch, 0.0);
    assert_eq!(loss, 0.0);
    assert!(grads.slices().iter().all(|s| s.iter().all(|&g| g == 0.0)));
}

fn smoke_traffic() -> TrafficConfig {
    TrafficConfig {
        n_devices: 4,
        lambda_high: 0.05,
        lambda_low: 0.005,
        p_high: 0.5,
        delta_t_slots: Some(1000),
        total_slots: 2000,
        slot_duration_ms: 0.5,
        seed: 0,
    }
}

fn smoke_config(episodes: usize) -> TrainConfig {
    TrainConfig {
        episodes,
        episode_slots: 2000,
        optimization_interval: 4,
        batch: 16,
        learning_rate: 1e-3,
        replay_capacity: 500,
        mixer_hidden: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_episodes_gives_initial_networks() {
    let scenario = Scenario::standard(4, 2);
    let out = train(&scenario, &smoke_traffic(), &smoke_config(0)).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoint.normalization.count, 0);
    assert_eq!(out.checkpoint.policy, PolicyTag::Tinyqmix);
    assert!(out.checkpoint.stats().unwrap().is_frozen());
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let scenario = Scenario::standard(4, 2);
    let a = train(&scenario, &smoke_traffic(), &smoke_config(3)).unwrap();
    let b = train(&scenario, &smoke_traffic(), &smoke_config(3)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log, b.log);
    assert!(a.log.iter().all(|r| r.mean_loss.is_none_or(f64::is_finite)));
    assert!(a.log.last().unwrap().optimizations > 0);

    let back = Checkpoint::from_json(&a.checkpoint.to_json().unwrap()).unwrap();
    assert_eq!(back, a.checkpoint);
    assert!(back.ensure_matches(&scenario.mac).is_ok());
    assert!(matches!(
        back.ensure_matches(&Scenario::standard(8, 2).mac),
        Err(CheckpointError::ScenarioMismatch(_))
    ));
}

#[test]
fn checkpoint_rejects_other_versions_and_bad_schema() {
    let scenario = Scenario::standard(4, 2);
    let cp = train(&scenario, &smoke_traffic(), &smoke_config(0)).unwrap().checkpoint;
    let mut v: serde_json::Value = serde_json::from_str(&cp.to_json().unwrap()).unwrap();
    v["format_version"] = 7.into();
    assert!(matches!(
        Checkpoint::from_json(&v.to_string()),
        Err(CheckpointError::VersionMismatch { found: 7, .. })
    ));
    v["format_version"] = 1.into();
    v["normalization"]["means"] = serde_json::json!([0.0]);
    assert!(matches!(
        Checkpoint::from_json(&v.to_string()),
        Err(CheckpointError::Schema { .. })
    ));
    v["normalization"] = serde_json::json!({"means": []});
    match Checkpoint::from_json(&v.to_string()) {
        Err(CheckpointError::Schema { path, .. }) => assert!(path.starts_with("normalization"), "{path}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn idqn_training_has_no_mixer() {
    let scenario = Scenario::standard(4, 2);
    let out = train_with(&scenario, &smoke_traffic(), &smoke_config(2), Algorithm::Idqn, |_| {}).unwrap();
    assert!(out.checkpoint.mixer.is_none());
    assert_eq!(out.checkpoint.policy, PolicyTag::Idqn);
    assert_eq!(out.log.len(), 2);
}

#[test]
fn epsilon_schedule_is_linear() {
    let cfg = TrainConfig {
        episodes: 11,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.epsilon_at(0), 0.9);
    assert!((cfg.epsilon_at(10) - 0.05).abs() < 1e-15);
    assert!((cfg.epsilon_at(5) - 0.475).abs() < 1e-12);
}
