//! Resource-selection policies behind one decision interface.
//!
//! | tag        | decides from                         | reserved slots |
//! |------------|--------------------------------------|----------------|
//! | `random`   | nothing                              | 0              |
//! | `rr`       | slot index (per-slot grants)         | 0              |
//! | `wf`       | devices' rate estimates              | 6 of 50        |
//! | `wflb`     | true current rates                   | 0              |
//! | `idqn`     | own local observation                | 0              |
//! | `tinyqmix` | own local observation                | 0              |

mod idqn;
mod learned;
mod waterfill;

pub use idqn::{idqn_loss, idqn_train};
pub use learned::LearnedPolicy;
pub use waterfill::{max_load, waterfill_assign, wf_policy_step, wflb_policy_step, WaterFillPolicy, WfState};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::SlotOutcome;
use crate::obs::{LocalObservation, ObsConfig};
use crate::qmix::{Checkpoint, CheckpointError};
use crate::{seeded_rng, SimRng};

/// Downlink slots WF reserves per scheduling interval.
pub const WF_OVERHEAD_SLOTS: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyTag {
    Random,
    Rr,
    Wf,
    Wflb,
    Idqn,
    Tinyqmix,
}

impl PolicyTag {
    pub const ALL: [PolicyTag; 6] = [
        PolicyTag::Random,
        PolicyTag::Rr,
        PolicyTag::Wf,
        PolicyTag::Wflb,
        PolicyTag::Idqn,
        PolicyTag::Tinyqmix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Random => "random",
            PolicyTag::Rr => "rr",
            PolicyTag::Wf => "wf",
            PolicyTag::Wflb => "wflb",
            PolicyTag::Idqn => "idqn",
            PolicyTag::Tinyqmix => "tinyqmix",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, PolicyTag::Idqn | PolicyTag::Tinyqmix)
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PolicyError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown policy tag `{0}` (expected random, rr, wf, wflb, idqn or tinyqmix)")]
    UnknownTag(String),
    #[error("policy {0} needs a checkpoint")]
    MissingCheckpoint(PolicyTag),
    #[error("checkpoint holds a {found} policy, {wanted} was requested")]
    TagMismatch { wanted: PolicyTag, found: PolicyTag },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Everything a policy may look at when an interval starts.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub slot: u64,
    pub observations: &'a [LocalObservation],
    /// True per-device rates at `slot`; only the idealized bound reads them.
    pub true_rates: &'a [f64],
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    /// One resource per device for the whole interval.
    Select(Vec<usize>),
    /// Per-slot exclusive grants from [`round_robin_grants`].
    RoundRobin,
}

pub trait Policy: Send {
    fn tag(&self) -> PolicyTag;

    /// Leading slots of each interval reserved for downlink signaling.
    fn reserved_slots(&self) -> u64 {
        0
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision;

    /// Per-slot feedback hook.
    fn on_slot(&mut self, _outcome: &SlotOutcome) {}

    /// Observation settings the policy was trained with, if it depends on them.
    fn obs_config(&self) -> Option<&ObsConfig> {
        None
    }
}

/// Independent uniform choice in `0..m` per device.
pub fn random_select(n_prime: usize, m: usize, rng: &mut SimRng) -> Vec<usize> {
    (0..n_prime).map(|_| rng.gen_range(0..m)).collect()
}

/// Resource device `device` may use at `slot`: opportunity `k = slot * m + r`
/// belongs to device `k mod n_prime`. At most one grant per device and slot.
pub fn round_robin_grant(slot: u64, device: usize, n_prime: usize, m: usize) -> Option<usize> {
    let base = slot.wrapping_mul(m as u64);
    (0..m).find(|&r| (base.wrapping_add(r as u64) % n_prime as u64) as usize == device)
}

/// [`round_robin_grant`] for every device of the cluster.
pub fn round_robin_grants(slot: u64, n_prime: usize, m: usize) -> Vec<Option<usize>> {
    let mut grants = vec![None; n_prime];
    let base = slot.wrapping_mul(m as u64);
    for r in 0..m {
        let dev = (base.wrapping_add(r as u64) % n_prime as u64) as usize;
        grants[dev].get_or_insert(r);
    }
    grants
}

#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: SimRng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seeded_rng(seed, 0x5e1ec7),
        }
    }
}

impl Policy for RandomPolicy {
    fn tag(&self) -> PolicyTag {
        PolicyTag::Random
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision {
        Decision::Select(random_select(ctx.observations.len(), ctx.m, &mut self.rng))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RoundRobinPolicy;

impl Policy for RoundRobinPolicy {
    fn tag(&self) -> PolicyTag {
        PolicyTag::Rr
    }

    fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Decision {
        Decision::RoundRobin
    }
}

/// Instantiates the policy for `tag`; learned policies need their checkpoint.
pub fn build_policy(
    tag: PolicyTag,
    seed: u64,
    checkpoint: Option<&Checkpoint>,
) -> Result<Box<dyn Policy>, PolicyError> {
    Ok(match tag {
        PolicyTag::Random => Box::new(RandomPolicy::new(seed)),
        PolicyTag::Rr => Box::new(RoundRobinPolicy),
        PolicyTag::Wf => Box::new(WaterFillPolicy::estimated(WF_OVERHEAD_SLOTS)),
        PolicyTag::Wflb => Box::new(WaterFillPolicy::ideal()),
        PolicyTag::Idqn | PolicyTag::Tinyqmix => {
            let cp = checkpoint.ok_or(PolicyError::MissingCheckpoint(tag))?;
            if cp.policy != tag {
                return Err(PolicyError::TagMismatch {
                    wanted: tag,
                    found: cp.policy,
                });
            }
            Box::new(LearnedPolicy::from_checkpoint(cp)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for t in PolicyTag::ALL {
            assert_eq!(t.as_str().parse::<PolicyTag>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert!("qmix".parse::<PolicyTag>().is_err());
    }

    #[test]
    fn random_with_single_resource() {
        let mut rng = seeded_rng(0, 0);
        assert_eq!(random_select(5, 1, &mut rng), vec![0; 5]);
    }

    #[test]
    fn random_is_uniform_and_seeded() {
        let mut rng = seeded_rng(1, 0);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[random_select(1, 4, &mut rng)[0]] += 1;
        }
        // 5 sigma of a binomial(1e5, 1/4).
        let sigma = (100_000.0f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 25_000.0).abs() < 5.0 * sigma, "{counts:?}");
        }
        assert_eq!(
            random_select(8, 3, &mut seeded_rng(9, 0)),
            random_select(8, 3, &mut seeded_rng(9, 0))
        );
    }

    #[test]
    fn round_robin_examples() {
        let seq: Vec<_> = (0..4)
            .map(|t| (0..3).find(|&d| round_robin_grant(t, d, 3, 1).is_some()).unwrap())
            .collect();
        assert_eq!(seq, vec![0, 1, 2, 0]);

        assert_eq!(round_robin_grants(0, 4, 2), vec![Some(0), Some(1), None, None]);
        assert_eq!(round_robin_grants(1, 4, 2), vec![None, None, Some(0), Some(1)]);
        for t in 0..20 {
            for d in 0..5 {
                assert_eq!(round_robin_grants(t, 5, 3)[d], round_robin_grant(t, d, 5, 3));
            }
        }
    }

    #[test]
    fn round_robin_is_exclusive() {
        for (n, m) in [(3, 1), (4, 2), (5, 3), (12, 2), (2, 2), (7, 4)] {
            for t in 0..200 {
                let g = round_robin_grants(t, n, m);
                let mut used = vec![false; m];
                for r in g.into_iter().flatten() {
                    assert!(!used[r], "resource {r} granted twice");
                    used[r] = true;
                }
            }
        }
    }
}
