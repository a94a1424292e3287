//! Cluster environment shared by training and evaluation: the MAC plus each
//! device's local observation, driven one scheduling interval at a time
//! over a trace.

use serde::{Deserialize, Serialize};

use crate::mac::{Access, Cluster, IntervalStats, MacConfig, MacError, SlotOutcome};
use crate::obs::{LocalObservation, ObsConfig};
use crate::policies::round_robin_grants;
use crate::traffic::TraceFile;
use crate::SimRng;

/// Static description of one cluster: MAC parameters plus observation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mac: MacConfig,
    pub obs: ObsConfig,
}

impl Scenario {
    pub fn standard(n_prime: usize, m: usize) -> Self {
        Self {
            mac: MacConfig::standard(n_prime, m),
            obs: ObsConfig::new(m),
        }
    }

    pub fn obs_width(&self) -> usize {
        self.obs.width()
    }

    pub fn state_width(&self) -> usize {
        self.mac.n_prime * self.obs.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    Contention,
    RoundRobin,
}

#[derive(Debug, Clone)]
pub struct ClusterEnv {
    cluster: Cluster,
    obs_cfg: ObsConfig,
    obs: Vec<LocalObservation>,
    rng: SimRng,
}

impl ClusterEnv {
    /// `rng` drives backoff draws.
    pub fn new(scenario: &Scenario, rng: SimRng) -> Result<Self, MacError> {
        if scenario.obs.m != scenario.mac.m {
            return Err(MacError::InvalidConfig(format!(
                "observation m ({}) differs from MAC m ({})",
                scenario.obs.m, scenario.mac.m
            )));
        }
        let cluster = Cluster::new(scenario.mac.clone())?;
        Ok(Self {
            obs: vec![LocalObservation::new(&scenario.obs); scenario.mac.n_prime],
            cluster,
            obs_cfg: scenario.obs.clone(),
            rng,
        })
    }

    /// Fresh buffers, backoff and estimators; the reserved-slot setting is kept.
    pub fn reset(&mut self, rng: SimRng) {
        self.cluster.reset();
        self.obs
            .iter_mut()
            .for_each(|o| *o = LocalObservation::new(&self.obs_cfg));
        self.rng = rng;
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn observations(&self) -> &[LocalObservation] {
        &self.obs
    }

    pub fn n_prime(&self) -> usize {
        self.obs.len()
    }

    /// Raw concatenated observations, `n_prime * (m + 2)` wide.
    pub fn joint_features(&self) -> Vec<f64> {
        let w = self.obs_cfg.width();
        let mut out = vec![0.0; self.obs.len() * w];
        for (o, chunk) in self.obs.iter().zip(out.chunks_exact_mut(w)) {
            o.write_features(chunk);
        }
        out
    }

    /// Commits the interval's resource choices; they become next decision's previous action.
    pub fn apply_choices(&mut self, choices: &[usize]) -> Result<(), MacError> {
        self.cluster.set_resources(choices)?;
        for (o, &c) in self.obs.iter_mut().zip(choices) {
            o.prev_action = c;
        }
        Ok(())
    }

    /// Steps from `start_slot` to the end of the interval (or of the trace).
    pub fn run_interval<F>(
        &mut self,
        trace: &TraceFile,
        start_slot: u64,
        mode: AccessMode,
        mut on_slot: F,
    ) -> IntervalStats
    where
        F: FnMut(&SlotOutcome),
    {
        let cfg = self.cluster.config();
        let (n, m) = (cfg.n_prime, cfg.m);
        let end = (start_slot + cfg.tau_slots).min(trace.total_slots);
        let alpha = self.obs_cfg.alpha;
        let mut stats = IntervalStats::new(n, m);
        for slot in start_slot..end {
            let row = &trace.row(slot)[..n];
            let out = match mode {
                AccessMode::Contention => self.cluster.step_slot(slot, row, Access::Contention, &mut self.rng),
                AccessMode::RoundRobin => {
                    let grants = round_robin_grants(slot, n, m);
                    self.cluster
                        .step_slot(slot, row, Access::Granted(&grants), &mut self.rng)
                }
            };
            for ((o, &a), d) in self.obs.iter_mut().zip(row).zip(&out.devices) {
                o.observe_slot(a, d, alpha);
            }
            stats.absorb(&out);
            on_slot(&out);
        }
        stats
    }
}
