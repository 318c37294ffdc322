//! Renders a result directory as `report.csv`: one row per run, with
//! throughput relative to the unprotected baseline when that run is
//! present in the same directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use keystone::metrics::MetricsReport;

use crate::config::{Variant, ALL_VARIANTS};
use crate::run::RunSummary;
use crate::{METRICS_FILE, REPORT_FILE, SUMMARY_FILE};

struct Row {
    variant: Variant,
    summary: RunSummary,
    metrics: MetricsReport,
}

/// Builds `report.csv` under `out_root` from every run found there.
/// Returns the CSV path and the number of rows written.
pub fn write_report(out_root: &Path) -> Result<(PathBuf, usize)> {
    let mut rows = Vec::new();
    for entry in std::fs::read_dir(out_root)
        .with_context(|| format!("reading {}", out_root.display()))?
    {
        let dir = entry?.path();
        let summary_path = dir.join(SUMMARY_FILE);
        if !summary_path.is_file() {
            continue;
        }
        let summary: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(&summary_path)?)
                .with_context(|| format!("parsing {}", summary_path.display()))?;
        let metrics_path = dir.join(METRICS_FILE);
        let metrics: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(&metrics_path)?)
                .with_context(|| format!("parsing {}", metrics_path.display()))?;
        rows.push(Row { variant: Variant::parse(&summary.variant)?, summary, metrics });
    }
    if rows.is_empty() {
        bail!("no runs found under {}", out_root.display());
    }
    rows.sort_by_key(|r| {
        ALL_VARIANTS.iter().position(|v| *v == r.variant).unwrap_or(ALL_VARIANTS.len())
    });

    let baseline = rows
        .iter()
        .find(|r| r.variant == Variant::NonTxn)
        .map(|r| r.metrics.throughput_txn_per_sec)
        .filter(|t| *t > 0.0);

    let path = out_root.join(REPORT_FILE);
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "variant",
        "workload",
        "seed",
        "workers",
        "pipeline_size",
        "measured_txns",
        "measured_secs",
        "throughput_txn_per_sec",
        "relative_to_non_txn",
        "committed",
        "aborted_attempts",
        "abort_rate",
        "tolerated_errors",
        "latency_mean_us",
        "latency_p50_us",
        "latency_p95_us",
        "i1_assign_us",
        "i2_schedule_us",
        "i3_turn_us",
        "i4_state_us",
        "i5_logic_us",
        "i6_persist_us",
        "i7_reply_us",
        "batches",
        "mean_batch_size",
        "mean_overlap_rate",
        "log_mode",
        "log_bytes_total",
        "log_bytes_post_seed",
        "log_records",
        "invariant_violations",
    ])?;

    let us = |ns: u64| format!("{:.1}", ns as f64 / 1_000.0);
    for row in &rows {
        let m = &row.metrics;
        let s = &row.summary;
        let relative = baseline
            .map(|b| format!("{:.3}", m.throughput_txn_per_sec / b))
            .unwrap_or_default();
        w.write_record([
            s.variant.clone(),
            s.workload.clone(),
            s.seed.to_string(),
            s.config.workers.to_string(),
            s.config.pipeline_size.to_string(),
            s.measured.txns.to_string(),
            format!("{:.3}", s.measured.secs),
            format!("{:.1}", m.throughput_txn_per_sec),
            relative,
            m.committed.to_string(),
            m.aborted_attempts.to_string(),
            format!("{:.4}", m.abort_rate),
            s.measured.tolerated_errors.to_string(),
            us(m.latency_mean_ns),
            us(m.latency_p50_ns),
            us(m.latency_p95_ns),
            us(m.latency_breakdown_ns[0]),
            us(m.latency_breakdown_ns[1]),
            us(m.latency_breakdown_ns[2]),
            us(m.latency_breakdown_ns[3]),
            us(m.latency_breakdown_ns[4]),
            us(m.latency_breakdown_ns[5]),
            us(m.latency_breakdown_ns[6]),
            m.batches.to_string(),
            format!("{:.2}", m.mean_batch_size),
            format!("{:.3}", m.mean_overlap_rate),
            m.log_mode.clone(),
            s.log.total.to_string(),
            s.log.post_seed.to_string(),
            s.log.records.to_string(),
            s.invariant_violations.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok((path, rows.len()))
}
