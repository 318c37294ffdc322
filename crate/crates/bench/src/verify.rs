//! Post-hoc validation of a result directory: replays each run's
//! write-ahead logs from scratch, checks the rebuilt state against the
//! digests recorded at run time, cross-checks the log manifest, and runs
//! the workload's invariant suite over the replayed state.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use keystone::state::ActorState;
use keystone::wal::{read_manifest, replay_dir, LogMode, MANIFEST_FILE};
use keystone::ActorId;

use crate::config::Variant;
use crate::run::RunSummary;
use crate::{actor_hash, states_hash, LOGS_DIR, SUMMARY_FILE};

/// Outcome of verifying one result directory. `failures` counts defects in
/// transactional runs; informational notes (baseline anomalies, skipped
/// replays) are only in `lines`.
#[derive(Debug, Default)]
pub struct VerifyReport {
    pub lines: Vec<String>,
    pub failures: u64,
    pub runs: u64,
}

impl VerifyReport {
    fn note(&mut self, variant: &str, msg: impl AsRef<str>) {
        self.lines.push(format!("[{variant}] {}", msg.as_ref()));
    }

    fn fail(&mut self, variant: &str, msg: impl AsRef<str>) {
        self.failures += 1;
        self.lines.push(format!("[{variant}] FAIL {}", msg.as_ref()));
    }
}

/// Verifies every run found under `out_root` (any subdirectory holding a
/// `run_summary.json`).
pub fn verify_out_dir(out_root: &Path) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let mut dirs: Vec<_> = std::fs::read_dir(out_root)
        .with_context(|| format!("reading {}", out_root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no runs found under {} (no {SUMMARY_FILE} in any subdirectory)", out_root.display());
    }
    for dir in dirs {
        verify_run(&dir, &mut report)?;
    }
    Ok(report)
}

fn verify_run(dir: &Path, report: &mut VerifyReport) -> Result<()> {
    let raw = std::fs::read_to_string(dir.join(SUMMARY_FILE))
        .with_context(|| format!("reading {}", dir.join(SUMMARY_FILE).display()))?;
    let summary: RunSummary = serde_json::from_str(&raw)
        .with_context(|| format!("parsing {}", dir.join(SUMMARY_FILE).display()))?;
    let variant = Variant::parse(&summary.variant)?;
    let v = summary.variant.as_str();
    report.runs += 1;
    report.note(
        v,
        format!(
            "{} seed {}: {} committed in {:.2}s",
            summary.workload, summary.seed, summary.measured.txns, summary.measured.secs
        ),
    );

    // Violations recorded against the live state at run time.
    if !summary.invariant_violations.is_empty() {
        if variant.is_transactional() {
            report.fail(
                v,
                format!(
                    "{} invariant violation(s) recorded at run time; first: {}",
                    summary.invariant_violations.len(),
                    summary.invariant_violations[0]
                ),
            );
        } else {
            report.note(
                v,
                format!(
                    "{} invariant violation(s) in the unprotected baseline (expected; it has no isolation)",
                    summary.invariant_violations.len()
                ),
            );
        }
    }

    let logs = dir.join(LOGS_DIR);
    if !logs.join(MANIFEST_FILE).is_file() {
        report.note(v, "replay skipped: no log manifest");
        return Ok(());
    }
    let manifest = read_manifest(&logs)
        .map_err(|e| anyhow::anyhow!("reading manifest in {}: {e}", logs.display()))?;
    if manifest.mode == LogMode::Disabled || manifest.actors.is_empty() {
        report.note(v, "replay skipped: logging was disabled");
        return Ok(());
    }

    let replayed = replay_dir(&logs)
        .map_err(|e| anyhow::anyhow!("replaying {}: {e}", logs.display()))?;

    // Stream soundness and manifest agreement.
    let mut clean = true;
    for entry in &manifest.actors {
        let actor = entry.actor();
        let Some(outcome) = replayed.get(&actor) else {
            report.fail(v, format!("{actor}: listed in manifest but not replayed"));
            clean = false;
            continue;
        };
        if let Some(err) = &outcome.error {
            report.fail(v, format!("{actor}: replay error: {err}"));
            clean = false;
        }
        if outcome.frames.len() as u64 != entry.records {
            report.fail(
                v,
                format!(
                    "{actor}: manifest says {} records, replay found {}",
                    entry.records,
                    outcome.frames.len()
                ),
            );
            clean = false;
        }
        let max_bid = outcome.frames.iter().map(|f| f.bid).max().unwrap_or(0);
        if max_bid != entry.last_bid {
            report.fail(
                v,
                format!(
                    "{actor}: manifest high-water bid {} but replay ends at {max_bid}",
                    entry.last_bid
                ),
            );
            clean = false;
        }
    }

    // Rebuild the full state picture: every actor the run dumped, with the
    // replayed state where the log has one and empty state where the actor
    // was never seeded or written.
    let mut states: BTreeMap<ActorId, ActorState> = BTreeMap::new();
    for name in summary.per_actor_hash.keys() {
        let actor: ActorId = name
            .parse()
            .map_err(|e| anyhow::anyhow!("bad actor id `{name}` in {SUMMARY_FILE}: {e}"))?;
        states.insert(actor, ActorState::new());
    }
    for (actor, outcome) in replayed {
        if !states.contains_key(&actor) {
            report.fail(v, format!("{actor}: in the log but absent from the run's state dump"));
            clean = false;
            continue;
        }
        states.insert(actor, outcome.state);
    }

    let mut hash_mismatches = 0u64;
    for (actor, state) in &states {
        let recorded = &summary.per_actor_hash[&actor.to_string()];
        let recomputed = actor_hash(actor, state);
        if &recomputed != recorded {
            hash_mismatches += 1;
            if hash_mismatches <= 3 {
                report.fail(v, format!("{actor}: replayed state digest differs from the run's"));
            }
            clean = false;
        }
    }
    if hash_mismatches > 3 {
        report.fail(v, format!("...and {} more digest mismatches", hash_mismatches - 3));
    }
    if states_hash(&states) != summary.state_hash {
        if hash_mismatches == 0 {
            report.fail(v, "combined state digest differs from the run's");
        }
        clean = false;
    }

    // Workload invariants over the replayed state.
    let workload = summary.config.workload.build(summary.seed, 0, 1)?;
    let violations = workload.check_invariants(&states);
    if violations.is_empty() {
        if clean {
            report.note(
                v,
                format!(
                    "replayed {} actors / {} records: state matches, invariants hold",
                    manifest.actors.len(),
                    manifest.actors.iter().map(|a| a.records).sum::<u64>()
                ),
            );
        }
    } else if variant.is_transactional() {
        for line in violations.iter().take(5) {
            report.fail(v, format!("replayed-state invariant violation: {line}"));
        }
        if violations.len() > 5 {
            report.fail(v, format!("...and {} more invariant violations", violations.len() - 5));
        }
    } else {
        report.note(
            v,
            format!("replayed state has {} baseline anomalies (expected)", violations.len()),
        );
    }
    Ok(())
}
