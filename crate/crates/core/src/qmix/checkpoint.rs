//! Self-describing JSON checkpoints: scenario, frozen normalization, agent
//! networks and (for QMIX) the mixer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentSet, MixerNet};
use crate::env::Scenario;
use crate::mac::MacConfig;
use crate::nn::Activation;
use crate::obs::{ObsError, RunningStats};
use crate::policies::PolicyTag;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u64 },
    #[error("checkpoint schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("checkpoint does not match scenario: {0}")]
    ScenarioMismatch(String),
    #[error(transparent)]
    Stats(#[from] ObsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioMeta {
    pub n_prime: usize,
    pub m: usize,
    pub tau_slots: u64,
    pub alpha: f64,
    pub success_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationRecord {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub episodes: usize,
    pub final_epsilon: f64,
    pub seed: u64,
    pub gamma: f64,
    pub optimizations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub policy: PolicyTag,
    pub scenario: ScenarioMeta,
    pub normalization: NormalizationRecord,
    pub agent: AgentSet,
    pub mixer: Option<MixerNet>,
    pub training_meta: TrainingMeta,
}

impl Checkpoint {
    pub fn from_training(
        policy: PolicyTag,
        scenario: &Scenario,
        stats: &RunningStats,
        agent: AgentSet,
        mixer: Option<MixerNet>,
        training_meta: TrainingMeta,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            policy,
            scenario: ScenarioMeta {
                n_prime: scenario.mac.n_prime,
                m: scenario.mac.m,
                tau_slots: scenario.mac.tau_slots,
                alpha: scenario.obs.alpha,
                success_init: scenario.obs.success_init,
            },
            normalization: NormalizationRecord {
                means: stats.mean().to_vec(),
                variances: stats.variance(),
                count: stats.count(),
            },
            agent,
            mixer,
            training_meta,
        }
    }

    /// Frozen statistics the agents were trained against.
    pub fn stats(&self) -> Result<RunningStats, CheckpointError> {
        let n = &self.normalization;
        Ok(RunningStats::from_frozen(
            n.count,
            n.means.clone(),
            n.variances.clone(),
        )?)
    }

    /// Structural consistency between the scenario block and the tensors.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let schema = |path: &str, message: String| {
            Err(CheckpointError::Schema {
                path: path.to_string(),
                message,
            })
        };
        let ScenarioMeta { n_prime, m, .. } = self.scenario;
        let width = m + 2;
        if !matches!(self.policy, PolicyTag::Tinyqmix | PolicyTag::Idqn) {
            return schema("policy", format!("{} is not a learned policy", self.policy));
        }
        let nets = &self.agent.networks;
        let expected_nets = if self.agent.shared { 1 } else { n_prime };
        if nets.len() != expected_nets {
            return schema(
                "agent.networks",
                format!("expected {expected_nets} networks, found {}", nets.len()),
            );
        }
        for (i, net) in nets.iter().enumerate() {
            let path = format!("agent.networks[{i}]");
            if net.layers.is_empty() {
                return schema(&path, "no layers".into());
            }
            if net.input_width() != width || net.output_width() != m {
                return schema(
                    &path,
                    format!(
                        "expected {width} -> {m}, found {} -> {}",
                        net.input_width(),
                        net.output_width()
                    ),
                );
            }
            for (k, pair) in net.layers.windows(2).enumerate() {
                if pair[0].out_dim != pair[1].in_dim {
                    return schema(&format!("{path}.layers[{}]", k + 1), "layer widths do not chain".into());
                }
            }
            for (k, l) in net.layers.iter().enumerate() {
                if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                    return schema(
                        &format!("{path}.layers[{k}]"),
                        "tensor length disagrees with dims".into(),
                    );
                }
                if !l.is_finite() {
                    return schema(&format!("{path}.layers[{k}]"), "non-finite parameter".into());
                }
            }
        }
        let norm = &self.normalization;
        if norm.means.len() != width || norm.variances.len() != width {
            return schema("normalization", format!("expected width {width}"));
        }
        match (&self.policy, &self.mixer) {
            (PolicyTag::Tinyqmix, None) => return schema("mixer", "missing".into()),
            (PolicyTag::Tinyqmix, Some(mix)) => {
                if mix.n_agents != n_prime || mix.state_dim != n_prime * width {
                    return schema("mixer", "dims disagree with scenario".into());
                }
                let h = mix.hidden;
                let expect = [n_prime * h, h, h, 1];
                for (k, (l, out)) in mix.layers().into_iter().zip(expect).enumerate() {
                    if l.in_dim != mix.state_dim
                        || l.out_dim != out
                        || l.weights.len() != l.in_dim * l.out_dim
                        || l.bias.len() != out
                        || l.activation != Activation::Identity
                    {
                        return schema(&format!("mixer.layer[{k}]"), "malformed hypernetwork tensor".into());
                    }
                }
                if !mix.is_finite() {
                    return schema("mixer", "non-finite parameter".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Fails unless the checkpoint was trained for this cluster shape.
    pub fn ensure_matches(&self, mac: &MacConfig) -> Result<(), CheckpointError> {
        let s = &self.scenario;
        if s.n_prime != mac.n_prime || s.m != mac.m || s.tau_slots != mac.tau_slots {
            return Err(CheckpointError::ScenarioMismatch(format!(
                "checkpoint has n_prime={}, m={}, tau={}; scenario has n_prime={}, m={}, tau={}",
                s.n_prime, s.m, s.tau_slots, mac.n_prime, mac.m, mac.tau_slots
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(found) => {
                return Err(CheckpointError::VersionMismatch {
                    expected: CHECKPOINT_VERSION,
                    found,
                })
            }
            None => {
                return Err(CheckpointError::Schema {
                    path: "format_version".into(),
                    message: "missing or not an unsigned integer".into(),
                })
            }
        }
        let cp: Checkpoint = serde_path_to_error::deserialize(value).map_err(|e| CheckpointError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cp.validate()?;
        Ok(cp)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, cp.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}
