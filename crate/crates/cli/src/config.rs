//! Run configuration: one JSON document, optionally patched with
//! `--set dotted.path=value` overrides before it is validated.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use gfarena_core::mac::MacConfig;
use gfarena_core::nn::OptimizerKind;
use gfarena_core::obs::ObsConfig;
use gfarena_core::policies::PolicyTag;
use gfarena_core::qmix::TrainConfig;
use gfarena_core::traffic::TrafficConfig;
use gfarena_core::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub mac: MacSection,
    pub obs: ObsSection,
    pub clusters: Vec<ClusterSection>,
    pub traffic: TrafficSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacSection {
    pub tau_slots: u64,
    pub cw_max: u32,
    pub l_buffer: usize,
    pub l_retry: u32,
    pub slot_duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsSection {
    pub alpha: f64,
    pub success_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub n_prime: usize,
    pub m: usize,
    pub agent_hidden: usize,
    pub mixer_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub p_high: f64,
    /// Redraw periods in seconds; `null` is static traffic.
    pub delta_t_s: Vec<Option<f64>>,
    pub trace_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub policies: Vec<PolicyTag>,
    /// Redraw period of the training traffic; `null` is static.
    pub delta_t_s: Option<f64>,
    pub episodes: usize,
    pub episode_duration_s: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub optimization_interval: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub target_sync_interval: usize,
    pub replay_capacity: usize,
    pub shared_agents: bool,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub policies: Vec<PolicyTag>,
}

/// Replaces the value at `path` (dot separated; array indices as numbers).
/// The right-hand side is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for key in path.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| anyhow!("override `{path}`: no field `{key}`"))?,
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| anyhow!("override `{path}`: `{key}` is not an array index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("override `{path}`: index {idx} out of range ({len} items)"))?
            }
            _ => bail!("override `{path}`: `{key}` indexes into a scalar"),
        };
    }
    *cur = value;
    Ok(())
}

/// Reads `path`, applies overrides and decodes, naming the offending field on error.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<(Config, Value)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg = decode(doc.clone())?;
    Ok((cfg, doc))
}

pub fn decode(doc: Value) -> Result<Config> {
    let cfg: Config =
        serde_path_to_error::deserialize(doc).map_err(|e| anyhow!("config field `{}`: {}", e.path(), e.inner()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config field `seeds`: at least one seed is required");
        }
        if self.clusters.is_empty() {
            bail!("config field `clusters`: at least one cluster is required");
        }
        for (i, c) in self.clusters.iter().enumerate() {
            self.mac_config(c)
                .validate()
                .map_err(|e| anyhow!("config field `clusters.{i}`: {e}"))?;
        }
        for (i, d) in self.traffic.delta_t_s.iter().enumerate() {
            if d.is_some_and(|d| d.is_nan() || d <= 0.0) {
                bail!("config field `traffic.delta_t_s.{i}`: must be positive or null");
            }
        }
        if self.traffic.trace_duration_s.is_nan() || self.traffic.trace_duration_s <= 0.0 {
            bail!("config field `traffic.trace_duration_s`: must be positive");
        }
        self.traffic_config(None, 1, 1, 0)
            .validate()
            .map_err(|e| anyhow!("config field `traffic`: {e}"))?;
        if let Some(p) = self.train.policies.iter().find(|p| !p.is_learned()) {
            bail!("config field `train.policies`: {p} is not trainable");
        }
        self.train_config(&self.clusters[0], 0)
            .validate()
            .map_err(|e| anyhow!("config field `train`: {e}"))?;
        Ok(())
    }

    pub fn slots(&self, seconds: f64) -> u64 {
        (seconds * 1000.0 / self.mac.slot_duration_ms).round() as u64
    }

    pub fn mac_config(&self, c: &ClusterSection) -> MacConfig {
        MacConfig {
            n_prime: c.n_prime,
            m: c.m,
            tau_slots: self.mac.tau_slots,
            cw_max: self.mac.cw_max,
            l_buffer: self.mac.l_buffer,
            l_retry: self.mac.l_retry,
            slot_duration_ms: self.mac.slot_duration_ms,
        }
    }

    pub fn scenario(&self, c: &ClusterSection) -> Scenario {
        Scenario {
            mac: self.mac_config(c),
            obs: ObsConfig {
                alpha: self.obs.alpha,
                m: c.m,
                success_init: self.obs.success_init,
            },
        }
    }

    /// Largest cluster; every trace carries this many device columns.
    pub fn trace_devices(&self) -> usize {
        self.clusters.iter().map(|c| c.n_prime).max().unwrap_or(1)
    }

    pub fn traffic_config(
        &self,
        delta_t_s: Option<f64>,
        n_devices: usize,
        total_slots: u64,
        seed: u64,
    ) -> TrafficConfig {
        TrafficConfig {
            n_devices,
            lambda_high: self.traffic.lambda_high,
            lambda_low: self.traffic.lambda_low,
            p_high: self.traffic.p_high,
            delta_t_slots: delta_t_s.map(|d| self.slots(d).max(1)),
            total_slots,
            slot_duration_ms: self.mac.slot_duration_ms,
            seed,
        }
    }

    pub fn train_config(&self, c: &ClusterSection, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            gamma: t.gamma,
            epsilon_start: t.epsilon_start,
            epsilon_end: t.epsilon_end,
            episodes: t.episodes,
            episode_slots: self.slots(t.episode_duration_s),
            optimization_interval: t.optimization_interval,
            batch: t.batch,
            learning_rate: t.learning_rate,
            target_sync_interval: t.target_sync_interval,
            replay_capacity: t.replay_capacity,
            agent_hidden: c.agent_hidden,
            mixer_hidden: c.mixer_hidden,
            shared_agents: t.shared_agents,
            optimizer: t.optimizer,
            seed,
        }
    }
}

/// `10`, `60`, `inf`: the label used in file and scenario names.
pub fn delta_label(delta_t_s: Option<f64>) -> String {
    match delta_t_s {
        None => "inf".into(),
        Some(d) if d.fract() == 0.0 => format!("{}", d as u64),
        Some(d) => format!("{d}"),
    }
}

pub fn trace_path(out: &Path, delta_t_s: Option<f64>, seed: u64) -> PathBuf {
    out.join("traces")
        .join(format!("dt{}_seed{seed}.tqtr", delta_label(delta_t_s)))
}

pub fn cluster_label(c: &ClusterSection) -> String {
    format!("n{}_m{}", c.n_prime, c.m)
}

pub fn checkpoint_path(out: &Path, policy: PolicyTag, c: &ClusterSection, seed: u64) -> PathBuf {
    out.join("checkpoints")
        .join(format!("{policy}_{}_seed{seed}.json", cluster_label(c)))
}

pub fn train_log_path(out: &Path, policy: PolicyTag, c: &ClusterSection, seed: u64) -> PathBuf {
    out.join("logs")
        .join(format!("{policy}_{}_seed{seed}.csv", cluster_label(c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_patch_nested_fields() {
        let mut doc = serde_json::json!({"a": {"b": [1, 2]}, "s": "x"});
        apply_override(&mut doc, "a.b.1=5").unwrap();
        apply_override(&mut doc, "s=hello").unwrap();
        apply_override(&mut doc, "a.c=1").unwrap_err();
        assert_eq!(doc, serde_json::json!({"a": {"b": [1, 5]}, "s": "hello"}));
        assert!(apply_override(&mut doc, "a.b.9=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(delta_label(Some(10.0)), "10");
        assert_eq!(delta_label(Some(2.5)), "2.5");
        assert_eq!(delta_label(None), "inf");
    }
}
