//! Monotonic value mixing and offline centralized training.
//!
//! Agents map their normalized local observation to `m` action values. The
//! [`MixerNet`] combines the chosen actions' values into `Q_tot`; since the
//! mixer is monotone in every agent value, each agent's greedy action is also
//! the joint greedy action, and execution needs no mixer.

mod checkpoint;
mod mixer;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, NormalizationRecord, ScenarioMeta, TrainingMeta,
    CHECKPOINT_VERSION,
};
pub use mixer::{MixerCache, MixerGrad, MixerNet};
pub use train::{train, train_with, Algorithm, EpisodeLog, TrainConfig, TrainError, TrainOutcome};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{argmax, GradientSet, Mlp};
use crate::SimRng;

/// Agent value networks, either one shared set of parameters or one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSet {
    pub shared: bool,
    pub networks: Vec<Mlp>,
}

impl AgentSet {
    pub fn new(n_agents: usize, m: usize, hidden: usize, shared: bool, rng: &mut SimRng) -> Self {
        let count = if shared { 1 } else { n_agents };
        Self {
            shared,
            networks: (0..count).map(|_| Mlp::agent(m, hidden, rng)).collect(),
        }
    }

    #[inline]
    pub fn net_index(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    #[inline]
    pub fn net(&self, agent: usize) -> &Mlp {
        &self.networks[self.net_index(agent)]
    }

    pub fn obs_width(&self) -> usize {
        self.networks[0].input_width()
    }

    pub fn n_actions(&self) -> usize {
        self.networks[0].output_width()
    }

    pub fn is_finite(&self) -> bool {
        self.networks.iter().all(Mlp::is_finite)
    }
}

/// Per-agent argmax over normalized joint observations `z`; also returns each
/// agent's full value vector. Ties go to the lowest resource index.
pub fn greedy_joint_action(agents: &AgentSet, z: &[f64], n_agents: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let w = agents.obs_width();
    assert_eq!(z.len(), n_agents * w, "joint observation width");
    let values: Vec<Vec<f64>> = (0..n_agents)
        .map(|i| agents.net(i).predict(&z[i * w..(i + 1) * w]))
        .collect();
    (values.iter().map(|q| argmax(q)).collect(), values)
}

/// Replaces each agent's action by a uniform resource with probability `epsilon`.
pub fn epsilon_greedy(greedy: &[usize], epsilon: f64, m: usize, rng: &mut SimRng) -> Vec<usize> {
    greedy
        .iter()
        .map(|&a| {
            if rng.gen::<f64>() < epsilon {
                rng.gen_range(0..m)
            } else {
                a
            }
        })
        .collect()
}

/// One decision step; observations are stored raw and normalized when sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub reward: f64,
    /// Each device's own success ratio for the interval.
    pub agent_rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
}

/// Trainable parameters: agents plus, for QMIX, the mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub agents: AgentSet,
    pub mixer: Option<MixerNet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerGrads {
    pub agents: Vec<GradientSet>,
    pub mixer: Option<MixerGrad>,
}

impl LearnerGrads {
    pub fn zeros_like(learner: &Learner) -> Self {
        Self {
            agents: learner.agents.networks.iter().map(GradientSet::zeros_like).collect(),
            mixer: learner.mixer.as_ref().map(MixerGrad::zeros_like),
        }
    }

    pub fn add_assign(&mut self, other: &LearnerGrads) {
        for (a, b) in self.agents.iter_mut().zip(&other.agents) {
            a.add_assign(b);
        }
        if let (Some(a), Some(b)) = (&mut self.mixer, &other.mixer) {
            a.add_assign(b);
        }
    }

    /// Agent tensors first, then mixer tensors; matches [`Learner::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.agents.iter().flat_map(|g| g.slices()).collect();
        if let Some(m) = &self.mixer {
            out.extend(m.slices());
        }
        out
    }
}

impl Learner {
    pub fn n_agents(&self) -> usize {
        self.mixer.as_ref().map_or(self.agents.networks.len(), |m| m.n_agents)
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.agents.networks.iter().flat_map(|n| n.param_slices()).collect();
        if let Some(m) = &self.mixer {
            out.extend(m.param_slices());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .agents
            .networks
            .iter_mut()
            .flat_map(|n| n.param_slices_mut())
            .collect();
        if let Some(m) = &mut self.mixer {
            out.extend(m.param_slices_mut());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.agents.is_finite() && self.mixer.as_ref().is_none_or(MixerNet::is_finite)
    }
}

const LOSS_CHUNKS: usize = 8;

/// Sums per-sample losses and gradients over fixed chunks so the result does
/// not depend on the thread count.
pub(crate) fn accumulate_batch<F>(learner: &Learner, batch: &[Transition], per_sample: F) -> (f64, LearnerGrads)
where
    F: Fn(&Transition, &mut LearnerGrads) -> f64 + Sync,
{
    let chunk = batch.len().div_ceil(LOSS_CHUNKS).max(1);
    let parts: Vec<(f64, LearnerGrads)> = batch
        .par_chunks(chunk)
        .map(|part| {
            let mut g = LearnerGrads::zeros_like(learner);
            let loss = part.iter().map(|t| per_sample(t, &mut g)).sum::<f64>();
            (loss, g)
        })
        .collect();
    let mut total = LearnerGrads::zeros_like(learner);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    (loss, total)
}

/// Training targets `r + gamma * max_u' Q_tot(z', u')` under the target
/// networks. With `gamma == 0` the target is the reward itself.
pub fn qmix_targets(batch: &[Transition], target: &Learner, gamma: f64) -> Vec<f64> {
    batch.iter().map(|t| qmix_target(t, target, gamma)).collect()
}

fn qmix_target(t: &Transition, target: &Learner, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return t.reward;
    }
    let mixer = target.mixer.as_ref().expect("qmix target needs a mixer");
    let (actions, values) = greedy_joint_action(&target.agents, &t.next_obs, mixer.n_agents);
    let q_max: Vec<f64> = actions.iter().zip(&values).map(|(&a, q)| q[a]).collect();
    t.reward + gamma * mixer.q_tot(&q_max, &t.next_obs)
}

/// Mean squared TD error of `Q_tot` over a batch of normalized transitions,
/// with gradients flowing through the mixer into every agent network.
pub fn qmix_loss(learner: &Learner, target: &Learner, batch: &[Transition], gamma: f64) -> (f64, LearnerGrads) {
    assert!(!batch.is_empty(), "empty batch");
    let mixer = learner.mixer.as_ref().expect("qmix loss needs a mixer");
    let n = mixer.n_agents;
    let w = learner.agents.obs_width();
    let m = learner.agents.n_actions();
    let scale = 1.0 / batch.len() as f64;

    accumulate_batch(learner, batch, |t, grads| {
        let mut q = vec![0.0; n];
        let caches: Vec<_> = (0..n)
            .map(|i| {
                let (out, cache) = learner.agents.net(i).forward(&t.obs[i * w..(i + 1) * w]);
                q[i] = out[t.actions[i]];
                cache
            })
            .collect();
        let (q_hat, mcache) = mixer.forward(&q, &t.obs);
        let diff = q_hat - qmix_target(t, target, gamma);
        let dq = mixer.backward(&mcache, &t.obs, 2.0 * diff * scale, grads.mixer.as_mut().unwrap());
        let mut dout = vec![0.0; m];
        for (i, cache) in caches.iter().enumerate() {
            dout.fill(0.0);
            dout[t.actions[i]] = dq[i];
            let idx = learner.agents.net_index(i);
            learner.agents.networks[idx].backward_accumulate(cache, &dout, &mut grads.agents[idx]);
        }
        diff * diff * scale
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests;
