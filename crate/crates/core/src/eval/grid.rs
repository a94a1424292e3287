use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{flops_per_second, run_policy_on_trace, MovingAveragePoint, RunMetrics};
use crate::env::Scenario;
use crate::policies::{build_policy, PolicyTag};
use crate::qmix::{load_checkpoint, Checkpoint};
use crate::traffic::{load_trace, TraceFile};

pub const SUMMARY_HEADER: &str =
    "scenario,policy,seed,n_prime,m,delta_t_s,mean_delay_ms,p50_ms,p95_ms,p99_ms,drop_frac,collision_rate,flops_per_s";
pub const TIMESERIES_HEADER: &str = "time_s,policy,moving_avg_delay_ms";

/// One (scenario, policy, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub scenario: String,
    pub policy: PolicyTag,
    pub seed: u64,
    pub cluster: Scenario,
    /// `None` for static traffic.
    pub delta_t_s: Option<f64>,
    pub trace_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    /// Agent width charged for learned policies when no checkpoint says otherwise.
    pub agent_hidden: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub policy: PolicyTag,
    pub seed: u64,
    pub n_prime: usize,
    pub m: usize,
    pub delta_t_s: Option<f64>,
    pub mean_delay_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub drop_frac: f64,
    pub collision_rate: f64,
    pub flops_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub scenario: String,
    pub policy: PolicyTag,
    pub seed: u64,
    pub points: Vec<MovingAveragePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub scenario: String,
    pub policy: PolicyTag,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: GridCell,
    pub row: SummaryRow,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridReport {
    /// Sorted by (scenario, policy, seed).
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

impl GridReport {
    pub fn rows(&self) -> Vec<SummaryRow> {
        self.results.iter().map(|r| r.row.clone()).collect()
    }

    pub fn series(&self) -> Vec<TimeSeries> {
        self.results
            .iter()
            .map(|r| TimeSeries {
                scenario: r.row.scenario.clone(),
                policy: r.row.policy,
                seed: r.row.seed,
                points: r.metrics.moving_average.clone(),
            })
            .collect()
    }
}

fn evaluate_cell(
    cell: &GridCell,
    traces: &BTreeMap<PathBuf, Result<TraceFile, String>>,
    checkpoints: &BTreeMap<PathBuf, Result<Checkpoint, String>>,
) -> Result<CellResult, String> {
    let trace = traces[&cell.trace_path]
        .as_ref()
        .map_err(|e| format!("trace {}: {e}", cell.trace_path.display()))?;
    let checkpoint = match (&cell.checkpoint_path, cell.policy.is_learned()) {
        (Some(p), true) => {
            let cp = checkpoints[p]
                .as_ref()
                .map_err(|e| format!("checkpoint {}: {e}", p.display()))?;
            cp.ensure_matches(&cell.cluster.mac).map_err(|e| e.to_string())?;
            Some(cp)
        }
        _ => None,
    };
    let mut policy = build_policy(cell.policy, cell.seed, checkpoint).map_err(|e| e.to_string())?;
    let metrics = run_policy_on_trace(policy.as_mut(), trace, &cell.cluster, cell.seed).map_err(|e| e.to_string())?;
    let hidden = checkpoint
        .and_then(|cp| cp.agent.networks.first())
        .map_or(cell.agent_hidden, |n| n.layers[0].out_dim);
    let mac = &cell.cluster.mac;
    let row = SummaryRow {
        scenario: cell.scenario.clone(),
        policy: cell.policy,
        seed: cell.seed,
        n_prime: mac.n_prime,
        m: mac.m,
        delta_t_s: cell.delta_t_s,
        mean_delay_ms: metrics.mean_delay_ms,
        p50_ms: metrics.p50_ms,
        p95_ms: metrics.p95_ms,
        p99_ms: metrics.p99_ms,
        drop_frac: metrics.drop_fraction(),
        collision_rate: metrics.collision_rate(),
        flops_per_s: flops_per_second(cell.policy, mac, hidden),
    };
    Ok(CellResult {
        cell: cell.clone(),
        row,
        metrics,
    })
}

/// Evaluates every cell on up to `workers` threads. A failing cell is
/// reported in [`GridReport::failures`] and the rest still run.
pub fn run_grid(grid: &ExperimentGrid, workers: usize) -> GridReport {
    let mut traces = BTreeMap::new();
    let mut checkpoints = BTreeMap::new();
    for cell in &grid.cells {
        traces
            .entry(cell.trace_path.clone())
            .or_insert_with(|| load_trace(&cell.trace_path).map_err(|e| e.to_string()));
        if let (Some(p), true) = (&cell.checkpoint_path, cell.policy.is_learned()) {
            checkpoints
                .entry(p.clone())
                .or_insert_with(|| load_checkpoint(p).map_err(|e| e.to_string()));
        }
    }

    let run = || -> Vec<Result<CellResult, String>> {
        grid.cells
            .par_iter()
            .map(|c| evaluate_cell(c, &traces, &checkpoints))
            .collect()
    };
    let outcomes = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(e) => {
            warn!("falling back to the global thread pool: {e}");
            run()
        }
    };

    let mut report = GridReport::default();
    for (cell, outcome) in grid.cells.iter().zip(outcomes) {
        match outcome {
            Ok(r) => report.results.push(r),
            Err(message) => {
                warn!("cell {}/{}/{} failed: {message}", cell.scenario, cell.policy, cell.seed);
                report.failures.push(CellFailure {
                    scenario: cell.scenario.clone(),
                    policy: cell.policy,
                    seed: cell.seed,
                    message,
                });
            }
        }
    }
    let key = |s: &String, p: PolicyTag, seed: u64| (s.clone(), p.as_str(), seed);
    report.results.sort_by(|a, b| {
        key(&a.row.scenario, a.row.policy, a.row.seed).cmp(&key(&b.row.scenario, b.row.policy, b.row.seed))
    });
    report
        .failures
        .sort_by(|a, b| key(&a.scenario, a.policy, a.seed).cmp(&key(&b.scenario, b.policy, b.seed)));
    report
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros trimmed.
pub fn format_sig(x: f64) -> String {
    const DIGITS: i32 = 6;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..DIGITS).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (DIGITS - 1 - exp) as usize, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn delta_t_field(d: Option<f64>) -> String {
    d.map_or_else(|| "inf".to_string(), format_sig)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.policy,
            r.seed,
            r.n_prime,
            r.m,
            delta_t_field(r.delta_t_s),
            format_sig(r.mean_delay_ms),
            format_sig(r.p50_ms),
            format_sig(r.p95_ms),
            format_sig(r.p99_ms),
            format_sig(r.drop_frac),
            format_sig(r.collision_rate),
            format_sig(r.flops_per_s),
        );
    }
    out
}

/// Rows for every series, in the given order.
pub fn timeseries_csv(series: &[TimeSeries]) -> String {
    let mut out = String::from(TIMESERIES_HEADER);
    out.push('\n');
    for s in series {
        for p in &s.points {
            let _ = writeln!(out, "{},{},{}", format_sig(p.time_s), s.policy, format_sig(p.value_ms));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(12.5), "12.5");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig(123456.7), "123457");
        assert_eq!(format_sig(1234567.0), "1.23457e+06");
        assert_eq!(format_sig(0.0001), "0.0001");
        assert_eq!(format_sig(0.00001234), "1.234e-05");
        assert_eq!(format_sig(-2.5), "-2.5");
        assert_eq!(format_sig(999999.5), "1e+06");
        assert_eq!(format_sig(f64::NAN), "nan");
    }
}
