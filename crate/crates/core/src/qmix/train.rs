use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{epsilon_greedy, greedy_joint_action, qmix_loss, AgentSet, Checkpoint, Learner, MixerNet, Transition};
use crate::env::{AccessMode, ClusterEnv, Scenario};
use crate::mac::{device_reward, interval_reward, MacError};
use crate::nn::{OptimizerKind, OptimizerState, ReplayMemory};
use crate::obs::RunningStats;
use crate::policies::{idqn_loss, PolicyTag};
use crate::seeded_rng;
use crate::traffic::{generate_trace, TraceError, TrafficConfig};

const STREAM_INIT: u64 = 1;
const STREAM_EXPLORE: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_BACKOFF: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Shared reward through the monotonic mixer.
    Qmix,
    /// Independent double-DQN learners on individual rewards.
    Idqn,
}

impl Algorithm {
    pub fn policy_tag(self) -> PolicyTag {
        match self {
            Algorithm::Qmix => PolicyTag::Tinyqmix,
            Algorithm::Idqn => PolicyTag::Idqn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub episodes: usize,
    pub episode_slots: u64,
    /// Decision steps between optimizer steps.
    pub optimization_interval: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Optimizer steps between hard target-network copies.
    pub target_sync_interval: usize,
    pub replay_capacity: usize,
    pub agent_hidden: usize,
    pub mixer_hidden: usize,
    /// One agent network for every device instead of one per device.
    pub shared_agents: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            epsilon_start: 0.9,
            epsilon_end: 0.05,
            episodes: 1000,
            episode_slots: 200_000,
            optimization_interval: 32,
            batch: 1024,
            learning_rate: 1e-4,
            target_sync_interval: 200,
            replay_capacity: 10_000,
            agent_hidden: 8,
            mixer_hidden: 64,
            shared_agents: false,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon values must be probabilities");
        }
        if self.epsilon_start < self.epsilon_end {
            return bad("epsilon_start must be at least epsilon_end");
        }
        if self.episode_slots == 0
            || self.optimization_interval == 0
            || self.batch == 0
            || self.target_sync_interval == 0
            || self.replay_capacity == 0
            || self.agent_hidden == 0
            || self.mixer_hidden == 0
        {
            return bad("counts and widths must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// Linear per-episode decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.epsilon_start;
        }
        let frac = (episode.min(self.episodes - 1)) as f64 / (self.episodes - 1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    /// Replay must hold this many transitions before the first optimizer step.
    pub fn warmup(&self) -> usize {
        self.batch.min(self.replay_capacity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    /// Mean loss over this episode's optimizer steps; `None` if there were none.
    pub mean_loss: Option<f64>,
    pub epsilon: f64,
    pub optimizations: u64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("training diverged in episode {episode} at optimization {optimization}: {reason}")]
    Diverged {
        episode: usize,
        optimization: u64,
        reason: String,
        /// Completed episodes before the failure.
        log: Vec<EpisodeLog>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpisodeLog>,
}

/// Per-episode traffic seed; distinct for every `(seed, episode)`.
fn episode_seed(seed: u64, episode: usize) -> u64 {
    let mut z = seed ^ (episode as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normalize_joint(stats: &RunningStats, raw: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    for (x, o) in raw.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        stats.normalize_into(x, o);
    }
    out
}

/// Centralized QMIX training; see [`train_with`].
pub fn train(scenario: &Scenario, traffic: &TrafficConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(scenario, traffic, cfg, Algorithm::Qmix, |_| {})
}

/// Runs `cfg.episodes` episodes of `cfg.episode_slots` slots each.
///
/// Every episode draws a fresh trace from `traffic` (its `n_devices`,
/// `total_slots` and `seed` are overridden). One transition is recorded per
/// scheduling interval and one optimizer step runs every
/// `optimization_interval` decisions once the replay holds
/// [`TrainConfig::warmup`] transitions. `on_episode` sees each finished
/// episode's log row.
pub fn train_with<F>(
    scenario: &Scenario,
    traffic: &TrafficConfig,
    cfg: &TrainConfig,
    algorithm: Algorithm,
    mut on_episode: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpisodeLog),
{
    cfg.validate()?;
    scenario.mac.validate()?;
    let (n, m) = (scenario.mac.n_prime, scenario.mac.m);
    let width = scenario.obs_width();

    let mut init_rng = seeded_rng(cfg.seed, STREAM_INIT);
    let agents = AgentSet::new(n, m, cfg.agent_hidden, cfg.shared_agents, &mut init_rng);
    let mixer = match algorithm {
        Algorithm::Qmix => Some(MixerNet::new(n, n * width, cfg.mixer_hidden, &mut init_rng)),
        Algorithm::Idqn => None,
    };
    let mut learner = Learner { agents, mixer };
    let mut target = learner.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut stats = RunningStats::new(width);
    let mut replay: ReplayMemory<Transition> = ReplayMemory::new(cfg.replay_capacity);
    let mut explore_rng = seeded_rng(cfg.seed, STREAM_EXPLORE);
    let mut sample_rng = seeded_rng(cfg.seed, STREAM_REPLAY);
    let mut env = ClusterEnv::new(scenario, seeded_rng(cfg.seed, STREAM_BACKOFF))?;

    let mut log = Vec::with_capacity(cfg.episodes);
    let mut decisions = 0u64;
    let mut optimizations = 0u64;

    for episode in 0..cfg.episodes {
        let epsilon = cfg.epsilon_at(episode);
        let ep_seed = episode_seed(cfg.seed, episode);
        let trace = generate_trace(&TrafficConfig {
            n_devices: n,
            total_slots: cfg.episode_slots,
            seed: ep_seed,
            ..traffic.clone()
        })?;
        env.reset(seeded_rng(ep_seed, STREAM_BACKOFF));

        let mut reward_sum = 0.0;
        let mut steps = 0usize;
        let mut loss_sum = 0.0;
        let mut ep_opts = 0u64;
        let mut slot = 0u64;
        while slot < trace.total_slots {
            let raw = env.joint_features();
            for x in raw.chunks_exact(width) {
                stats.update(x).expect("training statistics are never frozen");
            }
            let z = normalize_joint(&stats, &raw, width);
            let (greedy, _) = greedy_joint_action(&learner.agents, &z, n);
            let actions = epsilon_greedy(&greedy, epsilon, m, &mut explore_rng);
            env.apply_choices(&actions)?;
            let interval = env.run_interval(&trace, slot, AccessMode::Contention, |_| {});
            let reward = interval_reward(&interval);
            replay.push(Transition {
                obs: raw,
                agent_rewards: (0..n).map(|i| device_reward(&interval, i)).collect(),
                actions,
                reward,
                next_obs: env.joint_features(),
            });
            reward_sum += reward;
            steps += 1;
            decisions += 1;
            slot += scenario.mac.tau_slots;

            if !decisions.is_multiple_of(cfg.optimization_interval as u64) || replay.len() < cfg.warmup() {
                continue;
            }
            let batch: Vec<Transition> = replay
                .sample(cfg.batch, &mut sample_rng)
                .expect("replay is past warmup")
                .into_iter()
                .map(|t| Transition {
                    obs: normalize_joint(&stats, &t.obs, width),
                    next_obs: normalize_joint(&stats, &t.next_obs, width),
                    ..t.clone()
                })
                .collect();
            let (loss, grads) = match algorithm {
                Algorithm::Qmix => qmix_loss(&learner, &target, &batch, cfg.gamma),
                Algorithm::Idqn => idqn_loss(&learner, &target, &batch, cfg.gamma),
            };
            let diverged = |reason: String, log: Vec<EpisodeLog>| TrainError::Diverged {
                episode,
                optimization: optimizations,
                reason,
                log,
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}"), log));
            }
            if let Err(e) = opt.step(learner.param_slices_mut(), &grads.slices()) {
                return Err(diverged(e.to_string(), log));
            }
            if !learner.is_finite() {
                return Err(diverged("non-finite parameters after update".into(), log));
            }
            optimizations += 1;
            ep_opts += 1;
            loss_sum += loss;
            if optimizations.is_multiple_of(cfg.target_sync_interval as u64) {
                target = learner.clone();
            }
        }

        let row = EpisodeLog {
            episode,
            mean_reward: reward_sum / steps.max(1) as f64,
            mean_loss: (ep_opts > 0).then(|| loss_sum / ep_opts as f64),
            epsilon,
            optimizations,
        };
        debug!(
            "episode {} reward {:.4} loss {:?} eps {:.3}",
            row.episode, row.mean_reward, row.mean_loss, row.epsilon
        );
        on_episode(&row);
        log.push(row);
    }

    stats.freeze();
    let final_epsilon = if cfg.episodes == 0 {
        cfg.epsilon_start
    } else {
        cfg.epsilon_at(cfg.episodes - 1)
    };
    info!(
        "{:?} training finished: {} episodes, {} optimizer steps",
        algorithm, cfg.episodes, optimizations
    );
    let checkpoint = Checkpoint::from_training(
        algorithm.policy_tag(),
        scenario,
        &stats,
        learner.agents,
        learner.mixer,
        super::TrainingMeta {
            episodes: cfg.episodes,
            final_epsilon,
            seed: cfg.seed,
            gamma: cfg.gamma,
            optimizations,
        },
    );
    Ok(TrainOutcome { checkpoint, log })
}
