//! Grant-free uplink access under sporadic, dynamic machine-type traffic.
//!
//! The crate is split along the simulation pipeline:
//!
//! * [`traffic`] generates and persists dynamic Poisson arrival traces.
//! * [`mac`] steps a cluster of devices through slotted contention with
//!   binary exponential backoff.
//! * [`obs`] builds each device's local observation and its normalization.
//! * [`nn`] is a small dense-network engine with hand-written backprop.
//! * [`qmix`] holds the monotonic mixer, offline centralized training and
//!   checkpoints.
//! * [`policies`] collects every resource-selection policy behind
//!   [`policies::Policy`].
//! * [`eval`] replays traces through policies and summarizes delay metrics.

pub mod env;
pub mod eval;
pub mod mac;
pub mod nn;
pub mod obs;
pub mod policies;
pub mod qmix;
pub mod traffic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use env::{ClusterEnv, Scenario};
pub use eval::{run_policy_on_trace, RunMetrics};
pub use mac::{Cluster, DeviceState, IntervalStats, MacConfig, SlotOutcome};
pub use obs::{LocalObservation, ObsConfig, RunningStats};
pub use policies::{Policy, PolicyTag};
pub use qmix::{Checkpoint, MixerNet, TrainConfig};
pub use traffic::{RateSchedule, TraceFile, TrafficConfig};

/// Random generator used everywhere a reproducible stream is needed.
pub type SimRng = ChaCha8Rng;

/// Builds an independent generator for `(seed, stream)`.
///
/// Distinct streams of the same seed never overlap, so callers derive one
/// stream per purpose (trace, backoff, exploration, ...) instead of sharing.
pub fn seeded_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
