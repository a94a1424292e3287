//! Policy evaluation over persisted traces: per-packet delay ledger,
//! percentiles, moving averages, FLOP budgets and the experiment grid.

mod grid;

pub use grid::{
    format_sig, run_grid, summary_csv, timeseries_csv, CellFailure, ExperimentGrid, GridCell, GridReport, SummaryRow,
    TimeSeries, SUMMARY_HEADER, TIMESERIES_HEADER,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{AccessMode, ClusterEnv, Scenario};
use crate::mac::{DropCounts, MacConfig, MacError};
use crate::nn::{flops_of, Mlp};
use crate::policies::{Decision, DecisionContext, Policy, PolicyTag};
use crate::seeded_rng;
use crate::traffic::TraceFile;

/// Default moving-average window for delay-versus-time exports.
pub const MOVING_AVERAGE_WINDOW_S: f64 = 5.0;

/// FLOPs charged per observation feature at each decision (estimator update
/// and normalization share).
pub const OBS_FLOPS_PER_FEATURE: u64 = 4;

pub const FLOP_CONVENTION: &str = "per decision: dense layer = 2*in*out + out (+out if activated); \
    4 per observation feature; random = 1; rr and wflb = 0; wf = 4 (one rate estimate)";

const STREAM_EVAL_BACKOFF: u64 = 0xe7a1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace has {trace} devices, cluster needs {needed}")]
    TooFewDevices { trace: usize, needed: usize },
    #[error("trace slot duration {trace} ms differs from MAC slot duration {mac} ms")]
    SlotDurationMismatch { trace: f64, mac: f64 },
    #[error(transparent)]
    Mac(#[from] MacError),
}

/// One point of a bucketed delay series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingAveragePoint {
    /// End of the bucket.
    pub time_s: f64,
    pub value_ms: f64,
    /// No delivery fell in this bucket; the value is carried forward.
    pub carried: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: PolicyTag,
    /// Access delay of every delivered packet, in delivery order.
    pub delays_ms: Vec<f64>,
    /// Delivery time of each entry of `delays_ms` (end of its slot).
    pub delivery_times_s: Vec<f64>,
    pub mean_delay_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    /// Successful transmissions over attempts per interval (1 when idle).
    pub success_rate: Vec<f64>,
    /// Colliding transmissions per interval.
    pub collisions: Vec<u64>,
    pub drops: DropCounts,
    pub generated: u64,
    pub delivered: u64,
    pub buffered_end: u64,
    pub attempts: u64,
    /// Slots in which uplink was blocked by downlink reservation.
    pub reserved_slot_count: u64,
    pub total_slots: u64,
    pub moving_average: Vec<MovingAveragePoint>,
}

impl RunMetrics {
    /// `generated = delivered + dropped + buffered`.
    pub fn conservation_holds(&self) -> bool {
        self.generated == self.delivered + self.drops.total() + self.buffered_end
    }

    pub fn drop_fraction(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.drops.total() as f64 / self.generated as f64
        }
    }

    /// Colliding transmissions over all transmissions.
    pub fn collision_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.collisions.iter().sum::<u64>() as f64 / self.attempts as f64
        }
    }
}

/// Nearest-rank percentile of an ascending slice; NaN when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Tumbling-window mean of delays by delivery time. Buckets end at
/// `window, 2*window, ...` up to `horizon_s`; a bucket with no delivery
/// repeats the previous value (NaN before the first delivery) and is flagged.
pub fn moving_average(times_s: &[f64], delays_ms: &[f64], window_s: f64, horizon_s: f64) -> Vec<MovingAveragePoint> {
    assert!(window_s > 0.0, "window must be positive");
    let buckets = (horizon_s / window_s).ceil().max(0.0) as usize;
    let mut sums = vec![0.0; buckets];
    let mut counts = vec![0u64; buckets];
    for (&t, &d) in times_s.iter().zip(delays_ms) {
        // Bucket k covers (k*w, (k+1)*w].
        let k = ((t / window_s).ceil() as usize)
            .saturating_sub(1)
            .min(buckets.saturating_sub(1));
        if buckets > 0 {
            sums[k] += d;
            counts[k] += 1;
        }
    }
    let mut prev = f64::NAN;
    (0..buckets)
        .map(|k| {
            let carried = counts[k] == 0;
            if !carried {
                prev = sums[k] / counts[k] as f64;
            }
            MovingAveragePoint {
                time_s: (k + 1) as f64 * window_s,
                value_ms: prev,
                carried,
            }
        })
        .collect()
}

/// Replays `trace` (first `n_prime` columns) through `policy`. No learning
/// happens; the same inputs always give the same metrics.
pub fn run_policy_on_trace(
    policy: &mut dyn Policy,
    trace: &TraceFile,
    scenario: &Scenario,
    seed: u64,
) -> Result<RunMetrics, EvalError> {
    let mac = &scenario.mac;
    mac.validate()?;
    if trace.n_devices < mac.n_prime {
        return Err(EvalError::TooFewDevices {
            trace: trace.n_devices,
            needed: mac.n_prime,
        });
    }
    if trace.slot_duration_ms != mac.slot_duration_ms {
        return Err(EvalError::SlotDurationMismatch {
            trace: trace.slot_duration_ms,
            mac: mac.slot_duration_ms,
        });
    }
    let mut scenario = scenario.clone();
    if let Some(obs) = policy.obs_config() {
        scenario.obs = obs.clone();
    }
    let mut env = ClusterEnv::new(&scenario, seeded_rng(seed, STREAM_EVAL_BACKOFF))?;
    env.cluster_mut().reserve_downlink_slots(policy.reserved_slots())?;

    let slot_ms = mac.slot_duration_ms;
    let mut delays_ms = Vec::new();
    let mut delivery_times_s = Vec::new();
    let mut success_rate = Vec::new();
    let mut collisions = Vec::new();
    let mut attempts = 0u64;
    let mut reserved = 0u64;

    let mut slot = 0;
    while slot < trace.total_slots {
        let ctx = DecisionContext {
            slot,
            observations: env.observations(),
            true_rates: trace.schedule.rates_at(slot),
            m: mac.m,
        };
        let mode = match policy.decide(&ctx) {
            Decision::Select(choices) => {
                env.apply_choices(&choices)?;
                AccessMode::Contention
            }
            Decision::RoundRobin => AccessMode::RoundRobin,
        };
        let end = (slot + mac.tau_slots).min(trace.total_slots);
        reserved += (slot..end).filter(|&s| env.cluster().is_uplink_blocked(s)).count() as u64;
        let stats = env.run_interval(trace, slot, mode, |o| policy.on_slot(o));
        for d in &stats.deliveries {
            delays_ms.push(d.delay_slots as f64 * slot_ms);
            delivery_times_s.push((d.slot + 1) as f64 * slot_ms / 1000.0);
        }
        let tx = stats.total_attempts();
        attempts += tx;
        success_rate.push(if tx == 0 {
            1.0
        } else {
            stats.successes.iter().map(|&s| u64::from(s)).sum::<u64>() as f64 / tx as f64
        });
        collisions.push(stats.collisions);
        slot = end;
    }

    let ledger = env.cluster().ledger();
    let mut sorted = delays_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mean_delay_ms = if delays_ms.is_empty() {
        f64::NAN
    } else {
        delays_ms.iter().sum::<f64>() / delays_ms.len() as f64
    };
    let horizon_s = trace.total_slots as f64 * slot_ms / 1000.0;
    Ok(RunMetrics {
        policy: policy.tag(),
        moving_average: moving_average(&delivery_times_s, &delays_ms, MOVING_AVERAGE_WINDOW_S, horizon_s),
        mean_delay_ms,
        p50_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        p99_ms: percentile(&sorted, 99.0),
        delays_ms,
        delivery_times_s,
        success_rate,
        collisions,
        drops: ledger.drops,
        generated: ledger.generated,
        delivered: ledger.delivered,
        buffered_end: env.cluster().buffered(),
        attempts,
        reserved_slot_count: reserved,
        total_slots: trace.total_slots,
    })
}

/// Agent hidden width used for a cluster of `n_prime` devices in the full-scale sweep.
pub fn default_agent_hidden(n_prime: usize) -> usize {
    match n_prime {
        0..=24 => 8,
        25..=48 => 16,
        _ => 32,
    }
}

/// Mixer hidden width used for a cluster of `n_prime` devices in the full-scale sweep.
pub fn default_mixer_hidden(n_prime: usize) -> usize {
    match n_prime {
        0..=12 => 64,
        13..=24 => 128,
        25..=48 => 256,
        _ => 512,
    }
}

/// Execution-time FLOPs per second of one device running `tag`; see
/// [`FLOP_CONVENTION`]. Learned policies are costed on their agent network
/// only, since the mixer is not evaluated at execution time.
pub fn flops_per_second(tag: PolicyTag, mac: &MacConfig, agent_hidden: usize) -> f64 {
    let decisions = mac.intervals_per_second();
    let per_decision = match tag {
        PolicyTag::Random => 1,
        PolicyTag::Rr | PolicyTag::Wflb => 0,
        PolicyTag::Wf => OBS_FLOPS_PER_FEATURE,
        PolicyTag::Idqn | PolicyTag::Tinyqmix => {
            let width = mac.m + 2;
            agent_inference_flops(mac.m, agent_hidden) + OBS_FLOPS_PER_FEATURE * width as u64
        }
    };
    decisions * per_decision as f64
}

/// [`flops_of`] for an `(m + 2) -> hidden -> m` agent network.
pub fn agent_inference_flops(m: usize, hidden: usize) -> u64 {
    flops_of(&Mlp::zeros(&[m + 2, hidden, m]))
}
