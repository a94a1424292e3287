use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use gfarena_core::eval::{
    flops_per_second, format_sig, run_grid, summary_csv, timeseries_csv, ExperimentGrid, GridCell, FLOP_CONVENTION,
};
use gfarena_core::mac::DropCounts;
use gfarena_core::policies::PolicyTag;
use gfarena_core::qmix::{save_checkpoint, train_with, Algorithm, EpisodeLog, TrainError};
use gfarena_core::traffic::{generate_trace, store_trace};

use crate::config::{checkpoint_path, cluster_label, delta_label, trace_path, train_log_path, ClusterSection, Config};
use crate::manifest::RunManifest;

/// Evaluation traces use `seed + EVAL_TRACE_SEED_OFFSET` so they never
/// coincide with a training episode drawn from the same run seed.
pub const EVAL_TRACE_SEED_OFFSET: u64 = 1000;

pub const TRAIN_LOG_HEADER: &str = "episode,mean_reward,loss,epsilon";
pub const FLOPS_HEADER: &str = "policy,n_prime,m,agent_hidden,flops_per_s,convention";

/// Per-cell counters that do not fit the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDetail {
    pub scenario: String,
    pub policy: PolicyTag,
    pub seed: u64,
    pub generated: u64,
    pub delivered: u64,
    pub drops: DropCounts,
    pub buffered_end: u64,
    pub attempts: u64,
    pub collisions: u64,
    pub reserved_slot_count: u64,
    pub total_slots: u64,
    pub conservation_holds: bool,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| anyhow!("building worker pool: {e}"))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_traces(cfg: &Config, manifest: &mut RunManifest, workers: usize) -> Result<bool> {
    let slots = cfg.slots(cfg.traffic.trace_duration_s);
    let devices = cfg.trace_devices();
    let jobs: Vec<(Option<f64>, u64)> = cfg
        .traffic
        .delta_t_s
        .iter()
        .flat_map(|&dt| cfg.seeds.iter().map(move |&s| (dt, s)))
        .collect();
    let out = &cfg.out_dir;
    let results: Vec<Result<PathBuf>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(dt, seed)| {
                let tc = cfg.traffic_config(dt, devices, slots, seed + EVAL_TRACE_SEED_OFFSET);
                let trace = generate_trace(&tc)?;
                let path = trace_path(out, dt, seed);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir)?;
                }
                store_trace(&trace, &path)?;
                info!("wrote {} ({} packets)", path.display(), trace.total_packets());
                Ok(path)
            })
            .collect()
    });
    let mut ok = true;
    for r in results {
        match r {
            Ok(p) => manifest.record(&p)?,
            Err(e) => {
                error!("{e:#}");
                ok = false;
            }
        }
    }
    Ok(ok)
}

struct TrainJob<'a> {
    cluster: &'a ClusterSection,
    policy: PolicyTag,
    seed: u64,
}

fn algorithm_for(policy: PolicyTag) -> Result<Algorithm> {
    match policy {
        PolicyTag::Tinyqmix => Ok(Algorithm::Qmix),
        PolicyTag::Idqn => Ok(Algorithm::Idqn),
        other => Err(anyhow!("{other} is not trainable")),
    }
}

fn log_row(e: &EpisodeLog) -> String {
    format!(
        "{},{},{},{}\n",
        e.episode,
        format_sig(e.mean_reward),
        e.mean_loss.map_or_else(|| "nan".to_string(), format_sig),
        format_sig(e.epsilon)
    )
}

fn run_train_job(cfg: &Config, job: &TrainJob<'_>) -> Result<Vec<PathBuf>> {
    let out = &cfg.out_dir;
    let scenario = cfg.scenario(job.cluster);
    let tcfg = cfg.train_config(job.cluster, job.seed);
    let traffic = cfg.traffic_config(cfg.train.delta_t_s, job.cluster.n_prime, tcfg.episode_slots, job.seed);
    let log_path = train_log_path(out, job.policy, job.cluster, job.seed);
    let cp_path = checkpoint_path(out, job.policy, job.cluster, job.seed);
    let marker = cp_path.with_extension("FAILED");
    let _ = fs::remove_file(&marker);

    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    log.flush()?;
    let mut io_err = None;
    let label = format!("{}/{}/seed{}", job.policy, cluster_label(job.cluster), job.seed);
    let outcome = train_with(&scenario, &traffic, &tcfg, algorithm_for(job.policy)?, |e| {
        if e.episode % 10 == 0 || e.episode + 1 == tcfg.episodes {
            info!(
                "{label}: episode {} reward {:.4} eps {:.3}",
                e.episode, e.mean_reward, e.epsilon
            );
        }
        if let Err(err) = log.write_all(log_row(e).as_bytes()).and_then(|_| log.flush()) {
            io_err.get_or_insert(err);
        }
    });
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    drop(log);
    match outcome {
        Ok(done) => {
            save_checkpoint(&done.checkpoint, &cp_path)?;
            info!("wrote {}", cp_path.display());
            Ok(vec![log_path, cp_path])
        }
        Err(err @ TrainError::Diverged { .. }) => {
            write_file(&marker, format!("{err}\n").as_bytes())?;
            Err(anyhow!("{label}: {err}"))
        }
        Err(err) => Err(anyhow!("{label}: {err}")),
    }
}

pub fn train(cfg: &Config, manifest: &mut RunManifest, workers: usize) -> Result<bool> {
    let jobs: Vec<TrainJob<'_>> = cfg
        .clusters
        .iter()
        .flat_map(|c| {
            cfg.train.policies.iter().flat_map(move |&p| {
                cfg.seeds.iter().map(move |&seed| TrainJob {
                    cluster: c,
                    policy: p,
                    seed,
                })
            })
        })
        .collect();
    let results: Vec<Result<Vec<PathBuf>>> =
        pool(workers)?.install(|| jobs.par_iter().map(|j| run_train_job(cfg, j)).collect());
    let mut ok = true;
    for r in results {
        match r {
            Ok(paths) => {
                for p in paths {
                    manifest.record(&p)?;
                }
            }
            Err(e) => {
                error!("{e:#}");
                ok = false;
            }
        }
    }
    Ok(ok)
}

pub fn scenario_name(c: &ClusterSection, dt: Option<f64>) -> String {
    format!("{}_dt{}", cluster_label(c), delta_label(dt))
}

pub fn eval_grid(cfg: &Config) -> ExperimentGrid {
    let out = &cfg.out_dir;
    let mut cells = Vec::new();
    for c in &cfg.clusters {
        for &dt in &cfg.traffic.delta_t_s {
            for &seed in &cfg.seeds {
                for &policy in &cfg.eval.policies {
                    cells.push(GridCell {
                        scenario: scenario_name(c, dt),
                        policy,
                        seed,
                        cluster: cfg.scenario(c),
                        delta_t_s: dt,
                        trace_path: trace_path(out, dt, seed),
                        checkpoint_path: policy.is_learned().then(|| checkpoint_path(out, policy, c, seed)),
                        agent_hidden: c.agent_hidden,
                    });
                }
            }
        }
    }
    ExperimentGrid { cells }
}

pub fn eval(cfg: &Config, manifest: &mut RunManifest, workers: usize) -> Result<bool> {
    let out = &cfg.out_dir;
    let report = run_grid(&eval_grid(cfg), workers);

    let summary = out.join("summary.csv");
    write_file(&summary, summary_csv(&report.rows()).as_bytes())?;
    manifest.record(&summary)?;

    let mut by_run: BTreeMap<(String, u64), Vec<_>> = BTreeMap::new();
    for s in report.series() {
        by_run.entry((s.scenario.clone(), s.seed)).or_default().push(s);
    }
    for ((scenario, seed), series) in &by_run {
        let path = out.join("timeseries").join(format!("{scenario}_seed{seed}.csv"));
        write_file(&path, timeseries_csv(series).as_bytes())?;
        manifest.record(&path)?;
    }

    let details: Vec<CellDetail> = report
        .results
        .iter()
        .map(|r| {
            let m = &r.metrics;
            CellDetail {
                scenario: r.row.scenario.clone(),
                policy: r.row.policy,
                seed: r.row.seed,
                generated: m.generated,
                delivered: m.delivered,
                drops: m.drops,
                buffered_end: m.buffered_end,
                attempts: m.attempts,
                collisions: m.collisions.iter().sum(),
                reserved_slot_count: m.reserved_slot_count,
                total_slots: m.total_slots,
                conservation_holds: m.conservation_holds(),
            }
        })
        .collect();
    let details_path = out.join("eval_details.json");
    let mut text = serde_json::to_string_pretty(&details)?;
    text.push('\n');
    write_file(&details_path, text.as_bytes())?;
    manifest.record(&details_path)?;

    let failures_path = out.join("failures.csv");
    if report.failures.is_empty() {
        let _ = fs::remove_file(&failures_path);
        Ok(true)
    } else {
        let mut text = String::from("scenario,policy,seed,message\n");
        for f in &report.failures {
            error!("{}/{}/seed{}: {}", f.scenario, f.policy, f.seed, f.message);
            let _ = writeln!(
                text,
                "{},{},{},\"{}\"",
                f.scenario,
                f.policy,
                f.seed,
                f.message.replace('"', "'")
            );
        }
        write_file(&failures_path, text.as_bytes())?;
        Ok(false)
    }
}

pub fn flops_table(cfg: &Config) -> String {
    let mut out = String::from(FLOPS_HEADER);
    out.push('\n');
    let mut clusters: Vec<&ClusterSection> = cfg.clusters.iter().collect();
    clusters.sort_by_key(|c| (c.n_prime, c.m));
    for tag in PolicyTag::ALL {
        for c in &clusters {
            let mac = cfg.mac_config(c);
            let _ = writeln!(
                out,
                "{tag},{},{},{},{},\"{}\"",
                c.n_prime,
                c.m,
                c.agent_hidden,
                format_sig(flops_per_second(tag, &mac, c.agent_hidden)),
                FLOP_CONVENTION
            );
        }
    }
    out
}

pub fn flops(cfg: &Config, manifest: &mut RunManifest) -> Result<bool> {
    let path = cfg.out_dir.join("flops.csv");
    write_file(&path, flops_table(cfg).as_bytes())?;
    manifest.record(&path)?;
    Ok(true)
}
