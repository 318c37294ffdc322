//! Benchmark harness: drives the transactional actor runtime with the
//! bundled workloads, persists per-run artifacts (metrics, state digests,
//! commit traces, logs), re-validates runs by replaying their logs, and
//! renders result directories as CSV.

pub mod config;
pub mod report;
pub mod run;
pub mod verify;

use std::collections::BTreeMap;

use keystone::state::ActorState;
use keystone::wal::snapshot_of;
use keystone::wire::encode_snapshot;
use keystone::ActorId;
use sha2::{Digest, Sha256};

pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "run_summary.json";
pub const LOGS_DIR: &str = "logs";
pub const REPORT_FILE: &str = "report.csv";

fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of one actor's state: its id plus the snapshot wire encoding,
/// which covers keys, values, and dependency records (not apply
/// watermarks, so a replayed state hashes like the live one).
pub fn actor_hash(actor: &ActorId, state: &ActorState) -> String {
    let mut h = Sha256::new();
    h.update(actor.to_string().as_bytes());
    h.update(encode_snapshot(0, 0, &snapshot_of(state)));
    hex(&h.finalize())
}

/// Per-actor digests keyed by the actor's display form.
pub fn actor_hashes(states: &BTreeMap<ActorId, ActorState>) -> BTreeMap<String, String> {
    states.iter().map(|(a, s)| (a.to_string(), actor_hash(a, s))).collect()
}

/// Order-independent digest of a whole state dump. Matches the cluster's
/// own digest of the same states.
pub fn states_hash(states: &BTreeMap<ActorId, ActorState>) -> String {
    let mut h = Sha256::new();
    for (actor, state) in states {
        h.update(actor.to_string().as_bytes());
        h.update(encode_snapshot(0, 0, &snapshot_of(state)));
    }
    hex(&h.finalize())
}

/// Digest of a trace's event sequence, for cheap equality checks between
/// runs that should have committed identically.
pub fn commit_digest(events: &[String]) -> String {
    sha256_hex(events.join("\n").as_bytes())
}
