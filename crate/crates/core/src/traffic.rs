//! Dynamic sporadic Poisson traffic: rate redraws, trace generation and the
//! binary trace file format.
//!
//! A trace is a `[total_slots x n_devices]` matrix of per-slot packet counts
//! together with the rate schedule that produced it. Every `delta_t_slots`
//! all devices redraw their type (high or low activity) at the same slot.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{seeded_rng, SimRng};

pub const TRACE_MAGIC: &[u8; 4] = b"TQTR";
pub const TRACE_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 8 + 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid traffic configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic: expected \"TQTR\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("trace format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("corrupt trace: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub n_devices: usize,
    /// Packets per slot for high-activity devices.
    pub lambda_high: f64,
    /// Packets per slot for low-activity devices.
    pub lambda_low: f64,
    pub p_high: f64,
    /// Slots between synchronous rate redraws; `None` means static traffic.
    pub delta_t_slots: Option<u64>,
    pub total_slots: u64,
    pub slot_duration_ms: f64,
    pub seed: u64,
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |msg: String| Err(TraceError::InvalidConfig(msg));
        if self.n_devices == 0 {
            return bad("n_devices must be at least 1".into());
        }
        if !(self.lambda_low > 0.0 && self.lambda_low <= self.lambda_high && self.lambda_high < 1.0) {
            return bad(format!(
                "rates must satisfy 0 < lambda_low <= lambda_high < 1 (got {} and {})",
                self.lambda_low, self.lambda_high
            ));
        }
        if !(0.0..=1.0).contains(&self.p_high) {
            return bad(format!("p_high must lie in [0, 1] (got {})", self.p_high));
        }
        if self.delta_t_slots == Some(0) {
            return bad("delta_t_slots must be positive or infinite".into());
        }
        if self.total_slots == 0 {
            return bad("total_slots must be positive".into());
        }
        if self.slot_duration_ms.is_nan() || self.slot_duration_ms <= 0.0 {
            return bad("slot_duration_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start_slot: u64,
    pub rates: Vec<f64>,
}

/// Piecewise-constant per-device rates. Segment `k` is active from its
/// `start_slot` up to the next segment's start.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateSchedule {
    pub segments: Vec<RateSegment>,
}

impl RateSchedule {
    pub fn segment_index_at(&self, slot: u64) -> usize {
        self.segments
            .partition_point(|s| s.start_slot <= slot)
            .saturating_sub(1)
    }

    pub fn rates_at(&self, slot: u64) -> &[f64] {
        &self.segments[self.segment_index_at(slot)].rates
    }

    /// Half-open slot range `[start, end)` covered by segment `idx`.
    pub fn segment_span(&self, idx: usize, total_slots: u64) -> (u64, u64) {
        let start = self.segments[idx].start_slot;
        let end = self.segments.get(idx + 1).map_or(total_slots, |s| s.start_slot);
        (start, end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub n_devices: usize,
    pub total_slots: u64,
    pub slot_duration_ms: f64,
    pub schedule: RateSchedule,
    /// Slot-major `[total_slots x n_devices]`.
    pub arrivals: Vec<u8>,
}

impl TraceFile {
    pub fn row(&self, slot: u64) -> &[u8] {
        let start = slot as usize * self.n_devices;
        &self.arrivals[start..start + self.n_devices]
    }

    pub fn total_packets(&self) -> u64 {
        self.arrivals.iter().map(|&a| u64::from(a)).sum()
    }

    pub fn duration_s(&self) -> f64 {
        self.total_slots as f64 * self.slot_duration_ms / 1000.0
    }
}

/// Assigns every device the high rate with probability `p_high`, else the low one.
pub fn draw_device_rates(cfg: &TrafficConfig, rng: &mut SimRng) -> Vec<f64> {
    (0..cfg.n_devices)
        .map(|_| {
            if rng.gen::<f64>() < cfg.p_high {
                cfg.lambda_high
            } else {
                cfg.lambda_low
            }
        })
        .collect()
}

/// Poisson draw by multiplication of uniforms; exact, and cheap for small means.
pub fn sample_arrivals(rate: f64, rng: &mut SimRng) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    let limit = (-rate).exp();
    let mut k = 0u32;
    let mut p = rng.gen::<f64>();
    while p > limit {
        k += 1;
        p *= rng.gen::<f64>();
    }
    k
}

/// Generated trace plus the number of per-slot counts that had to be clamped
/// to fit the one-byte storage.
#[derive(Debug, Clone)]
pub struct GeneratedTrace {
    pub trace: TraceFile,
    pub clamped: u64,
}

pub fn generate_trace(cfg: &TrafficConfig) -> Result<TraceFile, TraceError> {
    generate_trace_counted(cfg).map(|g| g.trace)
}

pub fn generate_trace_counted(cfg: &TrafficConfig) -> Result<GeneratedTrace, TraceError> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, 0);
    let n = cfg.n_devices;
    let mut arrivals = Vec::with_capacity(cfg.total_slots as usize * n);
    let mut schedule = RateSchedule::default();
    let mut clamped = 0u64;
    let mut rates = Vec::new();

    for slot in 0..cfg.total_slots {
        let redraw = match cfg.delta_t_slots {
            Some(dt) => slot % dt == 0,
            None => slot == 0,
        };
        if redraw {
            rates = draw_device_rates(cfg, &mut rng);
            schedule.segments.push(RateSegment {
                start_slot: slot,
                rates: rates.clone(),
            });
        }
        for &rate in &rates {
            let k = sample_arrivals(rate, &mut rng);
            if k > u32::from(u8::MAX) {
                clamped += 1;
            }
            arrivals.push(k.min(u32::from(u8::MAX)) as u8);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} arrival counts exceeded 255 and were clamped");
    }

    Ok(GeneratedTrace {
        trace: TraceFile {
            n_devices: n,
            total_slots: cfg.total_slots,
            slot_duration_ms: cfg.slot_duration_ms,
            schedule,
            arrivals,
        },
        clamped,
    })
}

pub fn encode_trace(trace: &TraceFile) -> Vec<u8> {
    let seg_len = 8 + 8 * trace.n_devices;
    let mut buf = Vec::with_capacity(HEADER_LEN + seg_len * trace.schedule.segments.len() + trace.arrivals.len());
    buf.extend_from_slice(TRACE_MAGIC);
    buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trace.n_devices as u32).to_le_bytes());
    buf.extend_from_slice(&trace.total_slots.to_le_bytes());
    buf.extend_from_slice(&trace.slot_duration_ms.to_le_bytes());
    buf.extend_from_slice(&(trace.schedule.segments.len() as u32).to_le_bytes());
    for seg in &trace.schedule.segments {
        buf.extend_from_slice(&seg.start_slot.to_le_bytes());
        for r in &seg.rates {
            buf.extend_from_slice(&r.to_le_bytes());
        }
    }
    buf.extend_from_slice(&trace.arrivals);
    buf
}

pub fn store_trace(trace: &TraceFile, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&encode_trace(trace))?;
    out.flush()?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceFile, TraceError> {
    decode_trace(&fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, expected_total: u64) -> Result<[u8; N], TraceError> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(TraceError::Truncated {
                expected: expected_total.max(end as u64),
                actual: self.buf.len() as u64,
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(out)
    }
}

pub fn decode_trace(buf: &[u8]) -> Result<TraceFile, TraceError> {
    let mut cur = Cursor { buf, pos: 0 };
    let header = HEADER_LEN as u64;
    let magic: [u8; 4] = cur.take(header)?;
    if &magic != TRACE_MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(cur.take(header)?);
    if version != TRACE_VERSION {
        return Err(TraceError::VersionMismatch {
            expected: TRACE_VERSION,
            found: version,
        });
    }
    let n_devices = u32::from_le_bytes(cur.take(header)?) as usize;
    let total_slots = u64::from_le_bytes(cur.take(header)?);
    let slot_duration_ms = f64::from_le_bytes(cur.take(header)?);
    let n_segments = u32::from_le_bytes(cur.take(header)?) as usize;

    let seg_len = 8 + 8 * n_devices as u64;
    let payload = total_slots
        .checked_mul(n_devices as u64)
        .ok_or_else(|| TraceError::Corrupt("matrix size overflows".into()))?;
    let expected = header + seg_len * n_segments as u64 + payload;

    let mut segments = Vec::with_capacity(n_segments.min(1 << 20));
    for _ in 0..n_segments {
        let start_slot = u64::from_le_bytes(cur.take(expected)?);
        let mut rates = Vec::with_capacity(n_devices);
        for _ in 0..n_devices {
            rates.push(f64::from_le_bytes(cur.take(expected)?));
        }
        segments.push(RateSegment { start_slot, rates });
    }
    if buf.len() as u64 != expected {
        return Err(TraceError::Truncated {
            expected,
            actual: buf.len() as u64,
        });
    }
    if segments.first().map(|s| s.start_slot) != Some(0) {
        return Err(TraceError::Corrupt("first segment must start at slot 0".into()));
    }
    if segments.windows(2).any(|w| w[0].start_slot >= w[1].start_slot) {
        return Err(TraceError::Corrupt("segments are not strictly ordered".into()));
    }

    Ok(TraceFile {
        n_devices,
        total_slots,
        slot_duration_ms,
        schedule: RateSchedule { segments },
        arrivals: buf[cur.pos..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg() -> TrafficConfig {
        TrafficConfig {
            n_devices: 12,
            lambda_high: 0.1,
            lambda_low: 0.00833,
            p_high: 0.2,
            delta_t_slots: Some(20_000),
            total_slots: 40_000,
            slot_duration_ms: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn degenerate_type_probabilities() {
        let mut rng = seeded_rng(1, 0);
        let mut c = cfg();
        c.p_high = 0.0;
        assert!(draw_device_rates(&c, &mut rng).iter().all(|&r| r == c.lambda_low));
        c.p_high = 1.0;
        assert!(draw_device_rates(&c, &mut rng).iter().all(|&r| r == c.lambda_high));
    }

    #[test]
    fn high_fraction_follows_p_high() {
        let mut rng = seeded_rng(2, 0);
        let mut c = cfg();
        c.n_devices = 100_000;
        let rates = draw_device_rates(&c, &mut rng);
        let frac = rates.iter().filter(|&&r| r == c.lambda_high).count() as f64 / 1e5;
        assert!((frac - 0.2).abs() <= 0.01, "fraction {frac}");
    }

    #[test]
    fn zero_rate_never_arrives() {
        let mut rng = seeded_rng(3, 0);
        assert!((0..1000).all(|_| sample_arrivals(0.0, &mut rng) == 0));
    }

    #[test]
    fn poisson_mean_and_zero_mass() {
        let mut rng = seeded_rng(4, 0);
        let draws = 1_000_000;
        let mut sum = 0u64;
        let mut zeros = 0u64;
        for _ in 0..draws {
            let k = sample_arrivals(0.1, &mut rng);
            sum += u64::from(k);
            zeros += u64::from(k == 0);
        }
        let mean = sum as f64 / draws as f64;
        let p0 = zeros as f64 / draws as f64;
        assert!((mean - 0.1).abs() / 0.1 < 0.01, "mean {mean}");
        let expected_p0 = (-0.1f64).exp();
        assert!((p0 - expected_p0).abs() / expected_p0 < 0.01, "p0 {p0}");
    }

    #[test]
    fn static_traffic_has_one_segment() {
        let mut c = cfg();
        c.delta_t_slots = None;
        let t = generate_trace(&c).unwrap();
        assert_eq!(t.schedule.segments.len(), 1);
    }

    #[test]
    fn redraws_at_every_delta_t() {
        let t = generate_trace(&cfg()).unwrap();
        let starts: Vec<u64> = t.schedule.segments.iter().map(|s| s.start_slot).collect();
        assert_eq!(starts, vec![0, 20_000]);
        assert_eq!(t.arrivals.len(), 40_000 * 12);
    }

    #[test]
    fn zero_slots_rejected() {
        let mut c = cfg();
        c.total_slots = 0;
        assert!(matches!(generate_trace(&c), Err(TraceError::InvalidConfig(_))));
    }

    #[test]
    fn per_segment_means_match_schedule() {
        let mut c = cfg();
        c.total_slots = 200_000;
        c.delta_t_slots = Some(100_000);
        let t = generate_trace(&c).unwrap();
        for (idx, seg) in t.schedule.segments.iter().enumerate() {
            let (start, end) = t.schedule.segment_span(idx, t.total_slots);
            let len = (end - start) as f64;
            for (dev, &rate) in seg.rates.iter().enumerate() {
                let total: u64 = (start..end).map(|s| u64::from(t.row(s)[dev])).sum();
                let mean = total as f64 / len;
                let se = (rate / len).sqrt();
                assert!(
                    (mean - rate).abs() <= 3.0 * se,
                    "device {dev} segment {idx}: mean {mean}, rate {rate}"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_trace(&cfg()).unwrap(), generate_trace(&cfg()).unwrap());
    }

    #[test]
    fn rates_at_follows_segments() {
        let t = generate_trace(&cfg()).unwrap();
        assert_eq!(t.schedule.rates_at(0), &t.schedule.segments[0].rates[..]);
        assert_eq!(t.schedule.rates_at(19_999), &t.schedule.segments[0].rates[..]);
        assert_eq!(t.schedule.rates_at(20_000), &t.schedule.segments[1].rates[..]);
    }

    #[test]
    fn corrupted_magic_is_bad_magic() {
        let mut bytes = encode_trace(&generate_trace(&cfg()).unwrap());
        bytes[0] = b'X';
        assert!(matches!(decode_trace(&bytes), Err(TraceError::BadMagic(_))));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = encode_trace(&generate_trace(&cfg()).unwrap());
        bytes[4] = 9;
        assert!(matches!(
            decode_trace(&bytes),
            Err(TraceError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn inconsistent_payload_is_truncated() {
        let bytes = encode_trace(&generate_trace(&cfg()).unwrap());
        assert!(matches!(
            decode_trace(&bytes[..bytes.len() - 1]),
            Err(TraceError::Truncated { .. })
        ));
        // Header claims more slots than the payload holds.
        let mut bumped = bytes.clone();
        bumped[10..18].copy_from_slice(&40_001u64.to_le_bytes());
        assert!(matches!(decode_trace(&bumped), Err(TraceError::Truncated { .. })));
        assert!(matches!(decode_trace(&bytes[..3]), Err(TraceError::Truncated { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tqtr");
        let t = generate_trace(&cfg()).unwrap();
        store_trace(&t, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), t);
    }
}
