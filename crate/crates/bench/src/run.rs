//! Runs one configured experiment: builds a cluster for the chosen variant,
//! seeds the workload, drives warmup and measured phases through concurrent
//! client pipelines, and writes the run's artifacts under
//! `<out>/<variant>/` — `metrics.json`, `run_summary.json`, and the
//! write-ahead logs when logging is on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use futures::stream::{FuturesUnordered, StreamExt};
use keystone::metrics::MetricsReport;
use keystone::runtime::{Cluster, TxnHandle};
use keystone::TxnError;
use keystone_workloads::{Lane, Workload};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::{actor_hashes, commit_digest, LOGS_DIR, METRICS_FILE, SUMMARY_FILE};

/// Headline numbers for the measured window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MeasuredStats {
    /// Transactions submitted in the measured window.
    pub submitted: u64,
    /// Transactions committed in the measured window.
    pub txns: u64,
    pub secs: f64,
    pub throughput_txn_per_sec: f64,
    pub committed_by_path: BTreeMap<String, u64>,
    pub aborted_attempts: u64,
    /// Submissions whose final outcome was a tolerated error: lock-path
    /// retry budgets exhausted under contention, or method errors on the
    /// unprotected baseline.
    pub tolerated_errors: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceInfo {
    /// Running hash over every delivered batch schedule.
    pub schedule_chain: String,
    pub batches: u64,
    /// Digest of the commit-event sequence (batch and lock-path commits in
    /// commit order).
    pub commit_digest: String,
    pub events: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogVolume {
    /// Bytes in the log directory at the end of the run.
    pub total: u64,
    /// Bytes written by initial-state seeding alone.
    pub seed: u64,
    /// Bytes attributable to transactions (total minus seeding).
    pub post_seed: u64,
    /// Bytes written during the measured window only.
    pub measured_window: u64,
    pub records: u64,
}

/// Everything `verify` and `report` need about a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSummary {
    pub variant: String,
    pub workload: String,
    pub seed: u64,
    pub config: RunConfig,
    pub warmup_submitted: u64,
    pub measured: MeasuredStats,
    /// Order-independent digest of all master state after the run.
    pub state_hash: String,
    /// Digest per actor, keyed by `group[partition]`.
    pub per_actor_hash: BTreeMap<String, String>,
    pub trace: TraceInfo,
    pub log: LogVolume,
    /// Workload invariant violations found in the final state. Empty on a
    /// sound transactional run; the unprotected baseline may accumulate
    /// some, which is the point of running it.
    pub invariant_violations: Vec<String>,
}

pub struct RunOutcome {
    /// The per-variant artifact directory.
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Copy)]
enum PhaseGoal {
    Count(u64),
    Until(Instant),
}

#[derive(Debug, Default, Clone, Copy)]
struct PhaseTotals {
    submitted: u64,
    tolerated: u64,
}

/// Runs the experiment on a fresh multi-threaded async runtime. Must be
/// called from synchronous code.
pub fn run_experiment(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(cfg.threads as usize)
        .enable_all()
        .build()
        .context("building async runtime")?;
    rt.block_on(run_inner(cfg, out_root))
}

async fn run_inner(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    let dir = out_root.join(cfg.variant.label());
    let logs_dir = dir.join(LOGS_DIR);
    if logs_dir.exists() {
        std::fs::remove_dir_all(&logs_dir)
            .with_context(|| format!("clearing stale logs in {}", logs_dir.display()))?;
    }
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))?;

    let mut clients: Vec<Box<dyn Workload>> = (0..cfg.workers)
        .map(|i| cfg.workload.build(cfg.seed, i, cfg.workers))
        .collect::<Result<_>>()?;

    let log_mode = cfg.variant.log_mode(cfg.logging_enabled);
    let mut builder = Cluster::builder()
        .granularity(cfg.variant.granularity())
        .log_mode(log_mode)
        .flush_policy(cfg.flush.into())
        .log_dir(&logs_dir)
        .batch_triggers(cfg.batch_triggers());
    if let Some(limit) = cfg.act_retry_limit {
        builder = builder.act_retry_limit(limit);
    }
    for group in clients[0].groups() {
        builder = builder.group(group);
    }
    let cluster =
        Arc::new(builder.build().map_err(|e| anyhow!("building cluster: {e}"))?);

    cluster
        .seed(clients[0].seeds())
        .await
        .map_err(|e| anyhow!("seeding initial state: {e}"))?;
    let store = cluster.log_store();
    let seed_bytes = store.bytes_written();

    // Warmup: same traffic, discarded from measurement. The generators keep
    // their state across the phase boundary, so measured traffic continues
    // the same stream.
    let warmup_goal = match (cfg.warmup_txns, cfg.txns) {
        (Some(0), _) => None,
        (Some(n), _) => Some(PhaseGoal::Count(n)),
        (None, Some(t)) if t >= 10 => Some(PhaseGoal::Count(t / 10)),
        (None, Some(_)) => None,
        (None, None) => Some(PhaseGoal::Until(Instant::now() + Duration::from_secs(2))),
    };
    let mut warmup_submitted = 0;
    if let Some(goal) = warmup_goal {
        let (back, totals) = run_phase(&cluster, cfg, clients, goal).await?;
        clients = back;
        warmup_submitted = totals.submitted;
    }

    cluster.metrics().reset();
    let measured_start_bytes = store.bytes_written();
    let started = Instant::now();
    let measured_goal = match (cfg.txns, cfg.duration_secs) {
        (Some(t), _) => PhaseGoal::Count(t),
        (None, Some(d)) => PhaseGoal::Until(started + Duration::from_secs_f64(d)),
        (None, None) => unreachable!("validate() enforces txns xor durationSecs"),
    };
    let (clients, totals) = run_phase(&cluster, cfg, clients, measured_goal).await?;
    let elapsed = started.elapsed();

    let total_bytes = store.bytes_written();
    let records = store.records_written();
    let metrics = cluster.metrics().report(elapsed, log_mode, total_bytes);

    let states = cluster.dump_states();
    let state_hash = cluster.state_hash();
    let per_actor_hash = actor_hashes(&states);
    let trace = cluster.trace_summary();
    let invariant_violations = clients[0].check_invariants(&states);

    cluster
        .shutdown()
        .await
        .map_err(|e| anyhow!("sealing logs at shutdown: {e}"))?;

    let summary = RunSummary {
        variant: cfg.variant.label().to_string(),
        workload: cfg.workload.kind().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        warmup_submitted,
        measured: MeasuredStats {
            submitted: totals.submitted,
            txns: metrics.committed,
            secs: elapsed.as_secs_f64(),
            throughput_txn_per_sec: metrics.throughput_txn_per_sec,
            committed_by_path: metrics.committed_by_path.clone(),
            aborted_attempts: metrics.aborted_attempts,
            tolerated_errors: totals.tolerated,
        },
        state_hash,
        per_actor_hash,
        trace: TraceInfo {
            schedule_chain: trace.schedule_chain.clone(),
            batches: trace.batches,
            commit_digest: commit_digest(&trace.events),
            events: trace.events.len() as u64,
        },
        log: LogVolume {
            total: total_bytes,
            seed: seed_bytes,
            post_seed: total_bytes - seed_bytes,
            measured_window: total_bytes - measured_start_bytes,
            records,
        },
        invariant_violations,
    };

    std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?)
        .with_context(|| format!("writing {METRICS_FILE}"))?;
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {SUMMARY_FILE}"))?;

    Ok(RunOutcome { dir, summary, metrics })
}

/// Drives one phase across all client pipelines and hands the generators
/// back for the next phase.
async fn run_phase(
    cluster: &Arc<Cluster>,
    cfg: &RunConfig,
    clients: Vec<Box<dyn Workload>>,
    goal: PhaseGoal,
) -> Result<(Vec<Box<dyn Workload>>, PhaseTotals)> {
    let n = clients.len() as u64;
    let mut tasks = Vec::with_capacity(clients.len());
    for (i, workload) in clients.into_iter().enumerate() {
        let client_goal = match goal {
            // Split a count target across pipelines, remainder to the first.
            PhaseGoal::Count(total) => {
                let share = total / n + u64::from((i as u64) < total % n);
                PhaseGoal::Count(share)
            }
            PhaseGoal::Until(t) => PhaseGoal::Until(t),
        };
        let cluster = cluster.clone();
        let variant = cfg.variant;
        let pipeline = cfg.pipeline_size as usize;
        tasks.push(tokio::spawn(async move {
            drive(cluster, variant, workload, client_goal, pipeline).await
        }));
    }

    let mut back = Vec::with_capacity(tasks.len());
    let mut totals = PhaseTotals::default();
    for task in tasks {
        let (workload, t) =
            task.await.map_err(|e| anyhow!("client pipeline panicked: {e}"))??;
        back.push(workload);
        totals.submitted += t.submitted;
        totals.tolerated += t.tolerated;
    }
    Ok((back, totals))
}

/// One client pipeline: keeps up to `pipeline` submissions in flight until
/// the goal is reached, then drains.
async fn drive(
    cluster: Arc<Cluster>,
    variant: Variant,
    mut workload: Box<dyn Workload>,
    goal: PhaseGoal,
    pipeline: usize,
) -> Result<(Box<dyn Workload>, PhaseTotals)> {
    let granularity = cluster.granularity();
    let mut totals = PhaseTotals::default();
    let mut inflight = FuturesUnordered::new();

    loop {
        let more = match goal {
            PhaseGoal::Count(target) => totals.submitted < target,
            PhaseGoal::Until(deadline) => Instant::now() < deadline,
        };
        if !more {
            break;
        }
        if inflight.len() >= pipeline {
            let (lane, method, res) = inflight.next().await.expect("pipeline full");
            totals.tolerated += settle(variant, lane, method, res)?;
            continue;
        }
        let req = workload.next_request(granularity);
        let lane = req.lane;
        let method = req.method;
        let handle = submit(&cluster, variant, req)
            .await
            .map_err(|e| anyhow!("submitting {method}: {e}"))?;
        totals.submitted += 1;
        inflight.push(async move { (lane, method, handle.wait().await) });
    }

    // Cut the tail batch rather than waiting out the delay trigger.
    cluster.flush().map_err(|e| anyhow!("flushing scheduler: {e}"))?;
    while let Some((lane, method, res)) = inflight.next().await {
        totals.tolerated += settle(variant, lane, method, res)?;
    }
    Ok((workload, totals))
}

async fn submit(
    cluster: &Cluster,
    variant: Variant,
    req: keystone_workloads::TxnRequest,
) -> Result<TxnHandle, TxnError> {
    if !variant.is_transactional() {
        return cluster.submit_non_txn(req.root, req.method, req.args).await;
    }
    match req.lane {
        Lane::Scheduled => cluster.submit_pact(req.root, req.method, req.args, req.spec).await,
        Lane::Locked => cluster.submit_act(req.root, req.method, req.args).await,
    }
}

/// Classifies one settled submission: `Ok(1)` for a tolerated failure,
/// `Ok(0)` for a commit, `Err` for anything that means the run is broken.
///
/// Tolerated failures are (a) lock-path transactions that exhausted their
/// retry budget under contention and (b) method errors on the unprotected
/// baseline, where racing activations can legitimately observe torn state.
fn settle(
    variant: Variant,
    lane: Lane,
    method: &str,
    res: Result<keystone::Value, TxnError>,
) -> Result<u64> {
    match res {
        Ok(_) => Ok(0),
        Err(TxnError::Aborted { .. }) if variant.is_transactional() && lane == Lane::Locked => {
            Ok(1)
        }
        Err(e @ (TxnError::User(_) | TxnError::State(_) | TxnError::Dep(_)))
            if !variant.is_transactional() =>
        {
            let _ = e;
            Ok(1)
        }
        Err(e) => bail!("{method} failed fatally: {e}"),
    }
}
