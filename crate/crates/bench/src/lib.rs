//! Shared fixtures for the criterion benches.

use gfarena_core::qmix::{AgentSet, Learner, MixerNet, Transition};
use gfarena_core::traffic::generate_trace;
use gfarena_core::{seeded_rng, TraceFile, TrafficConfig};

/// Desk-load traffic for `n` devices over `slots` slots.
pub fn desk_trace(n: usize, slots: u64) -> TraceFile {
    generate_trace(&TrafficConfig {
        n_devices: n,
        lambda_high: 0.1,
        lambda_low: 0.00833,
        p_high: 0.2,
        delta_t_slots: Some(20_000),
        total_slots: slots,
        slot_duration_ms: 0.5,
        seed: 1,
    })
    .expect("valid traffic")
}

/// A QMIX learner with per-agent networks and a batch of synthetic transitions.
pub fn learner_and_batch(n: usize, m: usize, batch: usize) -> (Learner, Vec<Transition>) {
    let mut rng = seeded_rng(5, 0);
    let w = m + 2;
    let learner = Learner {
        agents: AgentSet::new(n, m, 8, false, &mut rng),
        mixer: Some(MixerNet::new(n, n * w, 64, &mut rng)),
    };
    let batch = (0..batch)
        .map(|k| {
            let f = |i: usize| ((k * 31 + i * 7) % 97) as f64 / 48.5 - 1.0;
            Transition {
                obs: (0..n * w).map(f).collect(),
                actions: (0..n).map(|i| (k + i) % m).collect(),
                reward: (k % 10) as f64 / 10.0,
                agent_rewards: vec![0.5; n],
                next_obs: (0..n * w).map(|i| f(i + 1)).collect(),
            }
        })
        .collect();
    (learner, batch)
}
