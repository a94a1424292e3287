use super::{Decision, DecisionContext, Policy, PolicyTag};
use crate::nn::{argmax, flops_of};
use crate::obs::{LocalObservation, ObsConfig, RunningStats};
use crate::qmix::{AgentSet, Checkpoint, CheckpointError};

/// Decentralized execution of a trained checkpoint: each device normalizes
/// its own observation with the frozen statistics and takes the argmax of
/// its agent network. The mixer is never evaluated.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    tag: PolicyTag,
    agents: AgentSet,
    stats: RunningStats,
    obs_cfg: ObsConfig,
    scratch: Vec<f64>,
    normed: Vec<f64>,
}

impl LearnedPolicy {
    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self, CheckpointError> {
        cp.validate()?;
        let s = &cp.scenario;
        let width = s.m + 2;
        Ok(Self {
            tag: cp.policy,
            agents: cp.agent.clone(),
            stats: cp.stats()?,
            obs_cfg: ObsConfig {
                alpha: s.alpha,
                m: s.m,
                success_init: s.success_init,
            },
            scratch: vec![0.0; width],
            normed: vec![0.0; width],
        })
    }

    /// Resource chosen by `device` given only its own observation.
    pub fn select(&mut self, device: usize, obs: &LocalObservation) -> usize {
        obs.write_features(&mut self.scratch);
        self.stats.normalize_into(&self.scratch, &mut self.normed);
        argmax(&self.agents.net(device).predict(&self.normed))
    }

    /// Inference FLOPs of one device decision.
    pub fn decision_flops(&self) -> u64 {
        flops_of(self.agents.net(0))
    }
}

impl Policy for LearnedPolicy {
    fn tag(&self) -> PolicyTag {
        self.tag
    }

    fn obs_config(&self) -> Option<&ObsConfig> {
        Some(&self.obs_cfg)
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision {
        let choices = ctx
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| self.select(i, o))
            .collect();
        Decision::Select(choices)
    }
}
