//! Run measurement: latency breakdowns, throughput and abort accounting,
//! batch statistics, and log-volume counters.
//!
//! Scheduled transactions get a seven-interval latency breakdown recorded
//! against the progress of the transaction on its first accessed actor:
//!
//! | interval | from → to |
//! |----------|-----------|
//! | i1 | client submit → transaction id assigned |
//! | i2 | id assigned → batch schedule delivered |
//! | i3 | schedule delivered → first turn granted |
//! | i4 | turn granted → transaction-local state copied |
//! | i5 | state ready → transaction logic complete (incl. cross-actor calls) |
//! | i6 | logic complete → first actor's batch log persisted |
//! | i7 | log persisted → client handle resolved |
//!
//! The intervals are differences of consecutive timestamps on one clock,
//! so they sum to the end-to-end latency exactly.

use crate::error::AbortCause;
use crate::wal::LogMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Which execution path a transaction took.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TxnKind {
    /// Deterministically scheduled, batch-committed.
    Pact,
    /// Lock-based with two-phase commit.
    Act,
    /// Unprotected direct execution (baseline mode).
    NonTxn,
}

impl TxnKind {
    fn label(self) -> &'static str {
        match self {
            TxnKind::Pact => "pact",
            TxnKind::Act => "act",
            TxnKind::NonTxn => "non_txn",
        }
    }
}

/// The eight breakpoints bounding the seven intervals. Breakpoints are
/// marked in order; marking one that is already set is ignored, and
/// missing ones inherit the previous breakpoint at interval computation,
/// yielding a zero-width interval rather than a panic.
#[derive(Clone, Debug)]
pub struct Timeline {
    marks: [Option<Instant>; 8],
}

/// Index names for [`Timeline::mark`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Breakpoint {
    Submitted = 0,
    TidAssigned = 1,
    ScheduleReceived = 2,
    TurnGranted = 3,
    StateReady = 4,
    LogicDone = 5,
    LogPersisted = 6,
    Replied = 7,
}

impl Timeline {
    pub fn starting_now() -> Self {
        let mut t = Timeline { marks: [None; 8] };
        t.mark(Breakpoint::Submitted);
        t
    }

    /// Records the breakpoint at the current instant, first time only.
    pub fn mark(&mut self, at: Breakpoint) {
        let slot = &mut self.marks[at as usize];
        if slot.is_none() {
            *slot = Some(Instant::now());
        }
    }

    /// Records the breakpoint at an explicit instant (used when the event
    /// was observed by another component, e.g. the log-persist time of the
    /// first actor).
    pub fn mark_at(&mut self, at: Breakpoint, instant: Instant) {
        let slot = &mut self.marks[at as usize];
        if slot.is_none() {
            *slot = Some(instant);
        }
    }

    pub fn is_marked(&self, at: Breakpoint) -> bool {
        self.marks[at as usize].is_some()
    }

    /// The seven intervals in nanoseconds. Unmarked breakpoints collapse
    /// onto their predecessor, producing zero-width intervals.
    pub fn intervals(&self) -> [u64; 7] {
        let mut out = [0u64; 7];
        let mut prev = self.marks[0].expect("timeline starts at submission");
        for (i, slot) in self.marks[1..].iter().enumerate() {
            let now = slot.unwrap_or(prev);
            out[i] = now.saturating_duration_since(prev).as_nanos() as u64;
            prev = now.max(prev);
        }
        out
    }

    pub fn end_to_end(&self) -> Duration {
        Duration::from_nanos(self.intervals().iter().sum())
    }
}

#[derive(Clone, Debug)]
enum Sample {
    Commit {
        kind: TxnKind,
        txn_type: String,
        end_to_end_ns: u64,
        intervals: Option<[u64; 7]>,
    },
    Abort {
        kind: TxnKind,
        txn_type: String,
        cause: AbortCause,
    },
    Batch {
        txns: u32,
        distinct_actors: u32,
    },
}

/// Concurrent append-only collector. Transactions and the coordinator
/// push samples during a run; the bench harness drains a report after.
#[derive(Debug, Default)]
pub struct MetricsSink {
    samples: Mutex<Vec<Sample>>,
}

impl MetricsSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_commit(
        &self,
        kind: TxnKind,
        txn_type: &str,
        end_to_end: Duration,
        intervals: Option<[u64; 7]>,
    ) {
        self.samples.lock().unwrap().push(Sample::Commit {
            kind,
            txn_type: txn_type.to_string(),
            end_to_end_ns: end_to_end.as_nanos() as u64,
            intervals,
        });
    }

    pub fn record_abort(&self, kind: TxnKind, txn_type: &str, cause: AbortCause) {
        self.samples.lock().unwrap().push(Sample::Abort {
            kind,
            txn_type: txn_type.to_string(),
            cause,
        });
    }

    pub fn record_batch(&self, txns: usize, distinct_actors: usize) {
        self.samples.lock().unwrap().push(Sample::Batch {
            txns: txns as u32,
            distinct_actors: distinct_actors as u32,
        });
    }

    /// Discards everything collected so far (end of a warmup phase).
    pub fn reset(&self) {
        self.samples.lock().unwrap().clear();
    }

    /// Summarizes the samples collected since the last reset.
    pub fn report(&self, elapsed: Duration, log_mode: LogMode, log_bytes: u64) -> MetricsReport {
        let samples = self.samples.lock().unwrap();
        let mut report = MetricsReport {
            elapsed_secs: elapsed.as_secs_f64(),
            log_mode: format!("{log_mode:?}").to_lowercase(),
            log_bytes,
            ..MetricsReport::default()
        };
        let mut latency_sums = [0u64; 7];
        let mut latency_count = 0u64;
        let mut end_to_end_ns: Vec<u64> = Vec::new();

        for sample in samples.iter() {
            match sample {
                Sample::Commit { kind, txn_type, end_to_end_ns: ns, intervals } => {
                    report.committed += 1;
                    *report.committed_by_path.entry(kind.label().into()).or_default() += 1;
                    let per_type = report.per_txn_type.entry(txn_type.clone()).or_default();
                    per_type.committed += 1;
                    per_type.total_latency_ns += ns;
                    end_to_end_ns.push(*ns);
                    if let Some(iv) = intervals {
                        latency_count += 1;
                        for (acc, v) in latency_sums.iter_mut().zip(iv) {
                            *acc += v;
                        }
                    }
                }
                Sample::Abort { kind, txn_type, cause } => {
                    report.aborted_attempts += 1;
                    *report.aborts_by_cause.entry(format!("{cause:?}")).or_default() += 1;
                    *report.aborted_by_path.entry(kind.label().into()).or_default() += 1;
                    report.per_txn_type.entry(txn_type.clone()).or_default().aborted += 1;
                }
                Sample::Batch { txns, distinct_actors } => {
                    report.batches += 1;
                    report.batched_txns += u64::from(*txns);
                    report.batched_actor_slots += u64::from(*distinct_actors);
                }
            }
        }

        let attempts = report.committed + report.aborted_attempts;
        report.abort_rate = if attempts == 0 {
            0.0
        } else {
            report.aborted_attempts as f64 / attempts as f64
        };
        if report.elapsed_secs > 0.0 {
            report.throughput_txn_per_sec = report.committed as f64 / report.elapsed_secs;
        }
        if report.batched_actor_slots > 0 {
            report.mean_overlap_rate =
                report.batched_txns as f64 / report.batched_actor_slots as f64;
        }
        if report.batches > 0 {
            report.mean_batch_size = report.batched_txns as f64 / report.batches as f64;
        }
        if latency_count > 0 {
            for (mean, sum) in report
                .latency_breakdown_ns
                .iter_mut()
                .zip(latency_sums)
            {
                *mean = sum / latency_count;
            }
            report.latency_samples = latency_count;
        }
        if !end_to_end_ns.is_empty() {
            end_to_end_ns.sort_unstable();
            report.latency_p50_ns = end_to_end_ns[end_to_end_ns.len() / 2];
            report.latency_p95_ns = end_to_end_ns[(end_to_end_ns.len() * 95 / 100).min(end_to_end_ns.len() - 1)];
            report.latency_mean_ns =
                end_to_end_ns.iter().sum::<u64>() / end_to_end_ns.len() as u64;
        }
        report
    }
}

/// Per-transaction-type tallies.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TxnTypeStats {
    pub committed: u64,
    pub aborted: u64,
    pub total_latency_ns: u64,
}

/// Aggregated measurement of one run. Round-trips through JSON so saved
/// reports can be read back by analysis tooling.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub elapsed_secs: f64,
    pub committed: u64,
    pub aborted_attempts: u64,
    pub abort_rate: f64,
    pub throughput_txn_per_sec: f64,
    pub committed_by_path: BTreeMap<String, u64>,
    pub aborted_by_path: BTreeMap<String, u64>,
    pub aborts_by_cause: BTreeMap<String, u64>,
    pub per_txn_type: BTreeMap<String, TxnTypeStats>,
    /// Mean width of each of the seven intervals, over transactions that
    /// carried a full timeline.
    pub latency_breakdown_ns: [u64; 7],
    pub latency_samples: u64,
    pub latency_mean_ns: u64,
    pub latency_p50_ns: u64,
    pub latency_p95_ns: u64,
    pub batches: u64,
    pub batched_txns: u64,
    pub batched_actor_slots: u64,
    pub mean_batch_size: f64,
    /// Mean transactions-per-distinct-actor across batches.
    pub mean_overlap_rate: f64,
    pub log_mode: String,
    pub log_bytes: u64,
}
