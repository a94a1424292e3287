//! Slotted grant-free MAC for one cluster of `n_prime` devices sharing `m`
//! resource units.
//!
//! Per slot: arrivals are buffered first, then every device with a head
//! packet and no pending backoff transmits on its resource. A resource with
//! a single transmitter delivers; two or more transmitters collide and each
//! colliding device runs binary exponential backoff. Packets are dropped on
//! buffer overflow (tail drop) or once their retry budget is spent.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum MacError {
    #[error("invalid MAC configuration: {0}")]
    InvalidConfig(String),
    #[error("device {device}: resource {resource} out of range (m = {m})")]
    ResourceOutOfRange { device: usize, resource: usize, m: usize },
    #[error("expected {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("cannot reserve {k} downlink slots in an interval of {tau} slots")]
    TooManyReservedSlots { k: u64, tau: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacConfig {
    /// Devices per cluster.
    pub n_prime: usize,
    /// Resource units per cluster.
    pub m: usize,
    /// Scheduling interval in slots.
    pub tau_slots: u64,
    pub cw_max: u32,
    pub l_buffer: usize,
    pub l_retry: u32,
    pub slot_duration_ms: f64,
}

impl MacConfig {
    /// Table I / simulation-scenario values for a cluster of `n_prime` devices on `m` resources.
    pub fn standard(n_prime: usize, m: usize) -> Self {
        Self {
            n_prime,
            m,
            tau_slots: 50,
            cw_max: 16,
            l_buffer: 16,
            l_retry: 16,
            slot_duration_ms: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), MacError> {
        let bad = |msg: &str| Err(MacError::InvalidConfig(msg.to_string()));
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if self.n_prime < self.m {
            return bad("n_prime must be at least m");
        }
        if self.tau_slots == 0 || self.cw_max == 0 || self.l_buffer == 0 || self.l_retry == 0 {
            return bad("tau_slots, cw_max, l_buffer and l_retry must be at least 1");
        }
        if self.slot_duration_ms.is_nan() || self.slot_duration_ms <= 0.0 {
            return bad("slot_duration_ms must be positive");
        }
        Ok(())
    }

    pub fn overloading(&self) -> f64 {
        self.n_prime as f64 / self.m as f64
    }

    pub fn intervals_per_second(&self) -> f64 {
        1000.0 / (self.tau_slots as f64 * self.slot_duration_ms)
    }

    pub fn slots_per_second(&self) -> f64 {
        1000.0 / self.slot_duration_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub arrival_slot: u64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    pub buffer: VecDeque<Packet>,
    pub cw: u32,
    pub backoff_remaining: u32,
    pub resource: usize,
}

impl Default for DeviceState {
    fn default() -> Self {
        Self {
            buffer: VecDeque::new(),
            cw: 1,
            backoff_remaining: 0,
            resource: 0,
        }
    }
}

impl DeviceState {
    /// Appends up to `k` packets stamped with `slot`; returns how many did not fit.
    pub fn enqueue(&mut self, k: u32, slot: u64, l_buffer: usize) -> u32 {
        let room = l_buffer.saturating_sub(self.buffer.len());
        let accepted = (k as usize).min(room);
        self.buffer.extend(std::iter::repeat_n(
            Packet {
                arrival_slot: slot,
                retries: 0,
            },
            accepted,
        ));
        k - accepted as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceOutcome {
    /// Nothing to send.
    Idle,
    /// Has a packet but may not transmit this slot (reserved downlink slot or
    /// no scheduled grant). Backoff is frozen.
    Held,
    /// Counting down its backoff; `remaining` is the value after this slot.
    BackingOff {
        remaining: u32,
    },
    Success {
        resource: usize,
        delay_slots: u64,
    },
    /// `dropped` is set when this collision exhausted the packet's retries.
    Collision {
        resource: usize,
        dropped: bool,
    },
}

impl DeviceOutcome {
    pub fn transmitted_on(&self) -> Option<usize> {
        match *self {
            DeviceOutcome::Success { resource, .. } | DeviceOutcome::Collision { resource, .. } => Some(resource),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotOutcome {
    pub slot: u64,
    pub devices: Vec<DeviceOutcome>,
    /// Number of transmitters per resource unit.
    pub transmitters: Vec<u32>,
    /// Packets rejected by each device's full buffer this slot.
    pub overflow: Vec<u32>,
}

/// Who may transmit in a slot.
#[derive(Debug, Clone, Copy)]
pub enum Access<'a> {
    /// Every device contends on its own selected resource.
    Contention,
    /// Only devices holding a grant transmit, on the granted resource.
    Granted(&'a [Option<usize>]),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub buffer_overflow: u64,
    pub retry_exhausted: u64,
}

impl DropCounts {
    pub fn total(&self) -> u64 {
        self.buffer_overflow + self.retry_exhausted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub slot: u64,
    pub delay_slots: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalStats {
    pub attempts: Vec<u32>,
    pub successes: Vec<u32>,
    pub resource_attempts: Vec<u32>,
    pub resource_successes: Vec<u32>,
    pub deliveries: Vec<Delivery>,
    pub drops: DropCounts,
    /// Transmissions that ended in a collision.
    pub collisions: u64,
}

impl IntervalStats {
    pub fn new(n_prime: usize, m: usize) -> Self {
        Self {
            attempts: vec![0; n_prime],
            successes: vec![0; n_prime],
            resource_attempts: vec![0; m],
            resource_successes: vec![0; m],
            ..Default::default()
        }
    }

    pub fn absorb(&mut self, outcome: &SlotOutcome) {
        for (dev, o) in outcome.devices.iter().enumerate() {
            match *o {
                DeviceOutcome::Success { resource, delay_slots } => {
                    self.attempts[dev] += 1;
                    self.successes[dev] += 1;
                    self.resource_attempts[resource] += 1;
                    self.resource_successes[resource] += 1;
                    self.deliveries.push(Delivery {
                        slot: outcome.slot,
                        delay_slots,
                    });
                }
                DeviceOutcome::Collision { resource, dropped } => {
                    self.attempts[dev] += 1;
                    self.resource_attempts[resource] += 1;
                    self.collisions += 1;
                    if dropped {
                        self.drops.retry_exhausted += 1;
                    }
                }
                _ => {}
            }
        }
        self.drops.buffer_overflow += outcome.overflow.iter().map(|&o| u64::from(o)).sum::<u64>();
    }

    pub fn total_attempts(&self) -> u64 {
        self.attempts.iter().map(|&a| u64::from(a)).sum()
    }
}

/// Mean per-device success ratio over the devices that attempted at least
/// once; 1.0 when nobody attempted.
pub fn interval_reward(stats: &IntervalStats) -> f64 {
    ratio_mean(&stats.successes, &stats.attempts)
}

/// One device's own success ratio for the interval (1.0 without attempts).
pub fn device_reward(stats: &IntervalStats, device: usize) -> f64 {
    match stats.attempts[device] {
        0 => 1.0,
        a => f64::from(stats.successes[device]) / f64::from(a),
    }
}

fn ratio_mean(successes: &[u32], attempts: &[u32]) -> f64 {
    let (sum, n) = successes
        .iter()
        .zip(attempts)
        .filter(|(_, &a)| a > 0)
        .fold((0.0, 0usize), |(sum, n), (&s, &a)| {
            (sum + f64::from(s) / f64::from(a), n + 1)
        });
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Running totals used for the packet conservation identity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ledger {
    pub generated: u64,
    pub delivered: u64,
    pub drops: DropCounts,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    cfg: MacConfig,
    devices: Vec<DeviceState>,
    reserved_slots: u64,
    ledger: Ledger,
}

impl Cluster {
    pub fn new(cfg: MacConfig) -> Result<Self, MacError> {
        cfg.validate()?;
        Ok(Self {
            devices: vec![DeviceState::default(); cfg.n_prime],
            cfg,
            reserved_slots: 0,
            ledger: Ledger::default(),
        })
    }

    pub fn config(&self) -> &MacConfig {
        &self.cfg
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn ledger(&self) -> Ledger {
        self.ledger
    }

    pub fn buffered(&self) -> u64 {
        self.devices.iter().map(|d| d.buffer.len() as u64).sum()
    }

    /// Clears buffers, backoff and accounting; keeps the reserved-slot setting.
    pub fn reset(&mut self) {
        self.devices.iter_mut().for_each(|d| *d = DeviceState::default());
        self.ledger = Ledger::default();
    }

    /// Fixes every device's resource for the coming interval. Backoff state carries over.
    pub fn set_resources(&mut self, choices: &[usize]) -> Result<(), MacError> {
        if choices.len() != self.devices.len() {
            return Err(MacError::LengthMismatch {
                expected: self.devices.len(),
                actual: choices.len(),
            });
        }
        if let Some((device, &resource)) = choices.iter().enumerate().find(|(_, &c)| c >= self.cfg.m) {
            return Err(MacError::ResourceOutOfRange {
                device,
                resource,
                m: self.cfg.m,
            });
        }
        for (dev, &c) in self.devices.iter_mut().zip(choices) {
            dev.resource = c;
        }
        Ok(())
    }

    /// Blocks uplink in the first `k` slots of every scheduling interval.
    pub fn reserve_downlink_slots(&mut self, k: u64) -> Result<(), MacError> {
        if k >= self.cfg.tau_slots {
            return Err(MacError::TooManyReservedSlots {
                k,
                tau: self.cfg.tau_slots,
            });
        }
        self.reserved_slots = k;
        Ok(())
    }

    pub fn reserved_slots(&self) -> u64 {
        self.reserved_slots
    }

    pub fn is_uplink_blocked(&self, slot: u64) -> bool {
        slot % self.cfg.tau_slots < self.reserved_slots
    }

    /// Advances one slot. `arrivals` must hold at least `n_prime` entries;
    /// only the first `n_prime` are used.
    pub fn step_slot(&mut self, slot: u64, arrivals: &[u8], access: Access<'_>, rng: &mut SimRng) -> SlotOutcome {
        let n = self.devices.len();
        let m = self.cfg.m;
        let blocked = self.is_uplink_blocked(slot);
        let mut overflow = vec![0u32; n];
        let mut tx_on: Vec<Option<usize>> = vec![None; n];
        let mut outcomes = vec![DeviceOutcome::Idle; n];
        let mut transmitters = vec![0u32; m];

        for (i, dev) in self.devices.iter_mut().enumerate() {
            let k = u32::from(arrivals[i]);
            self.ledger.generated += u64::from(k);
            overflow[i] = dev.enqueue(k, slot, self.cfg.l_buffer);
            self.ledger.drops.buffer_overflow += u64::from(overflow[i]);

            if dev.buffer.is_empty() {
                continue;
            }
            if blocked {
                outcomes[i] = DeviceOutcome::Held;
                continue;
            }
            if dev.backoff_remaining > 0 {
                dev.backoff_remaining -= 1;
                outcomes[i] = DeviceOutcome::BackingOff {
                    remaining: dev.backoff_remaining,
                };
                continue;
            }
            let resource = match access {
                Access::Contention => Some(dev.resource),
                Access::Granted(grants) => grants[i],
            };
            match resource {
                Some(r) => {
                    tx_on[i] = Some(r);
                    transmitters[r] += 1;
                }
                None => outcomes[i] = DeviceOutcome::Held,
            }
        }

        for (i, dev) in self.devices.iter_mut().enumerate() {
            let Some(resource) = tx_on[i] else { continue };
            if transmitters[resource] == 1 {
                let pkt = dev.buffer.pop_front().expect("transmitter has a head packet");
                dev.cw = 1;
                self.ledger.delivered += 1;
                outcomes[i] = DeviceOutcome::Success {
                    resource,
                    delay_slots: slot - pkt.arrival_slot + 1,
                };
            } else {
                let head = dev.buffer.front_mut().expect("transmitter has a head packet");
                let dropped = head.retries >= self.cfg.l_retry;
                if dropped {
                    dev.buffer.pop_front();
                    dev.cw = 1;
                    dev.backoff_remaining = 0;
                    self.ledger.drops.retry_exhausted += 1;
                } else {
                    head.retries += 1;
                    dev.cw = (dev.cw * 2).min(self.cfg.cw_max);
                    dev.backoff_remaining = rng.gen_range(1..=dev.cw);
                }
                outcomes[i] = DeviceOutcome::Collision { resource, dropped };
            }
        }

        SlotOutcome {
            slot,
            devices: outcomes,
            transmitters,
            overflow,
        }
    }

    /// Runs one scheduling interval of contention access starting at
    /// `start_slot`, one arrival row per slot.
    pub fn run_interval<'a, I>(&mut self, start_slot: u64, rows: I, rng: &mut SimRng) -> IntervalStats
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        self.run_interval_with(start_slot, rows, rng, |_, _| {})
    }

    /// As [`Cluster::run_interval`], calling `on_slot(arrivals, outcome)` after each slot.
    pub fn run_interval_with<'a, I, F>(
        &mut self,
        start_slot: u64,
        rows: I,
        rng: &mut SimRng,
        mut on_slot: F,
    ) -> IntervalStats
    where
        I: IntoIterator<Item = &'a [u8]>,
        F: FnMut(&[u8], &SlotOutcome),
    {
        let mut stats = IntervalStats::new(self.cfg.n_prime, self.cfg.m);
        for (offset, row) in rows.into_iter().take(self.cfg.tau_slots as usize).enumerate() {
            let out = self.step_slot(start_slot + offset as u64, row, Access::Contention, rng);
            stats.absorb(&out);
            on_slot(row, &out);
        }
        stats
    }
}
