use gfarena_core::qmix::{train, train_with, Algorithm, EpisodeLog, TrainConfig};
use gfarena_core::{Scenario, TrafficConfig};

fn smoke_traffic() -> TrafficConfig {
    TrafficConfig {
        n_devices: 6,
        lambda_high: 0.1,
        lambda_low: 0.00833,
        p_high: 1.0,
        delta_t_slots: Some(2_000),
        total_slots: 4_000,
        slot_duration_ms: 0.5,
        seed: 0,
    }
}

fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        episodes: 60,
        episode_slots: 4_000,
        optimization_interval: 4,
        batch: 64,
        learning_rate: 1e-3,
        replay_capacity: 2_000,
        mixer_hidden: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn window_means(log: &[EpisodeLog], w: usize) -> Vec<f64> {
    log.chunks(w)
        .map(|c| c.iter().map(|e| e.mean_reward).sum::<f64>() / c.len() as f64)
        .collect()
}

#[test]
fn smoke_training_improves_reward_in_most_seeds() {
    let scenario = Scenario::standard(6, 2);
    let mut improved = 0;
    let mut report = Vec::new();
    for seed in 0..3 {
        let out = train(&scenario, &smoke_traffic(), &smoke_config(seed)).unwrap();
        assert!(out.log.iter().all(|e| e.mean_loss.is_none_or(f64::is_finite)));
        let w = window_means(&out.log, 10);
        improved += usize::from(w.last() >= w.first());
        println!("seed {seed}: {w:?}");
        report.push(w);
    }
    assert!(improved >= 2, "10-episode reward windows per seed: {report:?}");
}

#[test]
fn idqn_smoke_run_is_finite() {
    let cfg = TrainConfig {
        episodes: 5,
        ..smoke_config(1)
    };
    let mut rows = 0;
    let out = train_with(
        &Scenario::standard(6, 2),
        &smoke_traffic(),
        &cfg,
        Algorithm::Idqn,
        |_| rows += 1,
    )
    .unwrap();
    assert_eq!(rows, 5);
    assert!(out.checkpoint.mixer.is_none());
    assert!(out.log.iter().all(|e| e.mean_loss.is_none_or(f64::is_finite)));
}
