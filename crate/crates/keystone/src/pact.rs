//! Deterministic batching for pre-declared transactions.
//!
//! A pre-declared transaction announces, before it starts, which actors it
//! will call (and how often), and under key-level granularity exactly which
//! keys it touches on each. The coordinator collects submissions, cuts a
//! batch on a size or delay trigger, and derives one [`BatchSchedule`]: an
//! ascending-tid order per actor, optional per-key tid lists, and a
//! `prev_bid` link telling each actor which batch must finish before this
//! one may start. Actors then execute without any locking — a transaction
//! takes its turn when every earlier tid in the relevant order released
//! it, which is what makes conflict aborts impossible on this path.
//!
//! Everything here is pure bookkeeping; the runtime owns timers, mailboxes
//! and the commit broadcast.

use crate::error::TxnError;
use crate::types::{AccessMode, ActorId, Granularity, Key};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::time::Duration;

/// Declared accesses for one actor: how many calls the transaction will
/// make to it, and (key-level) which keys those calls touch.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ActorAccess {
    pub count: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keys: Option<IndexMap<Key, AccessMode>>,
}

/// Per-transaction access declaration, actor by actor. Over-declaring is
/// legal (turns are simply released unused); under-declaring any access is
/// a runtime error that aborts the batch.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct AccessSpec {
    pub entries: IndexMap<ActorId, ActorAccess>,
}

impl AccessSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares `count` whole-actor accesses (actor-level granularity).
    pub fn actor(mut self, actor: ActorId, count: u32) -> Self {
        self.entries.insert(actor, ActorAccess { count, keys: None });
        self
    }

    /// Declares `count` accesses touching exactly `keys` (key-level).
    /// Calling again for the same actor replaces its entry.
    pub fn keys<I>(mut self, actor: ActorId, count: u32, keys: I) -> Self
    where
        I: IntoIterator<Item = (Key, AccessMode)>,
    {
        self.entries
            .insert(actor, ActorAccess { count, keys: Some(keys.into_iter().collect()) });
        self
    }

    /// Adds keys to an actor's entry, creating it (count 1) if missing;
    /// an existing key's mode is widened, never narrowed.
    pub fn add_keys<I>(&mut self, actor: &ActorId, keys: I)
    where
        I: IntoIterator<Item = (Key, AccessMode)>,
    {
        let entry = self
            .entries
            .entry(actor.clone())
            .or_insert_with(|| ActorAccess { count: 1, keys: Some(IndexMap::new()) });
        let map = entry.keys.get_or_insert_with(IndexMap::new);
        for (key, mode) in keys {
            let slot = map.entry(key).or_insert(mode);
            if mode == AccessMode::ReadWrite {
                *slot = AccessMode::ReadWrite;
            }
        }
    }

    /// Bumps the declared access count for an actor already in the spec,
    /// or inserts a key-less entry with that count.
    pub fn bump_count(&mut self, actor: &ActorId, extra: u32) {
        match self.entries.get_mut(actor) {
            Some(entry) => entry.count += extra,
            None => {
                self.entries.insert(actor.clone(), ActorAccess { count: extra, keys: None });
            }
        }
    }

    pub fn get(&self, actor: &ActorId) -> Option<&ActorAccess> {
        self.entries.get(actor)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, granularity: Granularity) -> Result<(), TxnError> {
        if self.entries.is_empty() {
            return Err(TxnError::InvalidSpec("no actors declared".into()));
        }
        for (actor, access) in &self.entries {
            if access.count == 0 {
                return Err(TxnError::InvalidSpec(format!("zero access count for {actor}")));
            }
            match (granularity, &access.keys) {
                (Granularity::KeyLevel, None) => {
                    return Err(TxnError::InvalidSpec(format!(
                        "key-level run but no keys declared for {actor}"
                    )));
                }
                (Granularity::KeyLevel, Some(keys)) if keys.is_empty() => {
                    return Err(TxnError::InvalidSpec(format!(
                        "key-level run but empty key set for {actor}"
                    )));
                }
                (Granularity::ActorLevel, Some(_)) => {
                    return Err(TxnError::InvalidSpec(format!(
                        "actor-level run but keys declared for {actor}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One transaction's slot in an actor's batch order.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TxnSlot {
    pub tid: u64,
    /// Declared number of accesses; the actor decrements per call and
    /// passes the turn onward when it reaches zero with no call active.
    pub count: u32,
}

/// What one actor must execute for one batch.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ActorSchedule {
    /// Ascending-tid execution order on this actor.
    pub txn_order: Vec<TxnSlot>,
    /// Key-level only: ascending tid list per declared key. Always a
    /// subsequence of `txn_order`'s tids.
    pub per_key: IndexMap<Key, Vec<u64>>,
    /// Declared access modes per key for this batch (key-level only).
    pub key_modes: IndexMap<Key, AccessMode>,
    /// The batch this actor must fully finish before starting this one;
    /// 0 means this is the actor's first batch.
    pub prev_bid: u64,
}

/// A formed batch: the unit of scheduling, commit, and logging.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub bid: u64,
    pub granularity: Granularity,
    pub actors: IndexMap<ActorId, ActorSchedule>,
    /// Every transaction in the batch, ascending.
    pub tids: Vec<u64>,
}

impl BatchSchedule {
    /// Transactions per distinct actor touched — the batch's actor-overlap
    /// measure, higher meaning more sharing.
    pub fn overlap_rate(&self) -> f64 {
        if self.actors.is_empty() {
            return 0.0;
        }
        self.tids.len() as f64 / self.actors.len() as f64
    }

    /// Canonical byte form; identical schedules serialize identically
    /// (insertion orders are part of the schedule, so this is a faithful
    /// determinism check).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("schedule serializes")
    }

    pub fn max_tid(&self) -> u64 {
        self.tids.last().copied().unwrap_or(0)
    }
}

/// Builds the schedule for one batch of pre-declared transactions.
///
/// `pending` must be in ascending tid order. `last_batch_per_actor` is the
/// coordinator's chaining table: it supplies each actor's `prev_bid` and
/// is advanced to `bid` for every actor this batch touches.
pub fn form_batch(
    bid: u64,
    granularity: Granularity,
    pending: &[(u64, AccessSpec)],
    last_batch_per_actor: &mut HashMap<ActorId, u64>,
) -> BatchSchedule {
    debug_assert!(pending.windows(2).all(|w| w[0].0 < w[1].0), "tids must ascend");
    let mut actors: IndexMap<ActorId, ActorSchedule> = IndexMap::new();
    for (tid, spec) in pending {
        for (actor, access) in &spec.entries {
            let slot = actors.entry(actor.clone()).or_insert_with(|| ActorSchedule {
                txn_order: Vec::new(),
                per_key: IndexMap::new(),
                key_modes: IndexMap::new(),
                prev_bid: last_batch_per_actor.get(actor).copied().unwrap_or(0),
            });
            slot.txn_order.push(TxnSlot { tid: *tid, count: access.count });
            if granularity == Granularity::KeyLevel {
                if let Some(keys) = &access.keys {
                    for (key, mode) in keys {
                        slot.per_key.entry(key.clone()).or_default().push(*tid);
                        let m = slot.key_modes.entry(key.clone()).or_insert(*mode);
                        if *mode == AccessMode::ReadWrite {
                            *m = AccessMode::ReadWrite;
                        }
                    }
                }
            }
        }
    }
    for actor in actors.keys() {
        last_batch_per_actor.insert(actor.clone(), bid);
    }
    BatchSchedule {
        bid,
        granularity,
        actors,
        tids: pending.iter().map(|(tid, _)| *tid).collect(),
    }
}

/// When the coordinator cuts a batch: at `max_size` pending transactions
/// or `max_delay` after the oldest pending one arrived, whichever first.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BatchTriggers {
    pub max_size: usize,
    #[serde(with = "duration_millis")]
    pub max_delay: Duration,
}

impl Default for BatchTriggers {
    fn default() -> Self {
        BatchTriggers { max_size: 64, max_delay: Duration::from_millis(5) }
    }
}

pub(crate) mod duration_millis {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_secs_f64() * 1000.0).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(ms / 1000.0))
    }
}

#[derive(thiserror::Error, Debug, PartialEq, Eq)]
pub enum TrackerError {
    #[error("batch {0} is not registered")]
    UnknownBatch(u64),
}

/// Commit progress of one batch.
#[derive(Clone, Debug)]
pub struct BatchStatus {
    pub bid: u64,
    pub pending_actors: HashSet<ActorId>,
    pub committed: bool,
}

/// Coordinator-side ledger of in-flight batches. A batch commits when
/// every participating actor has executed its schedule slice and persisted
/// its log record.
#[derive(Default, Debug)]
pub struct BatchTracker {
    batches: HashMap<u64, BatchStatus>,
}

impl BatchTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schedule: &BatchSchedule) {
        self.batches.insert(
            schedule.bid,
            BatchStatus {
                bid: schedule.bid,
                pending_actors: schedule.actors.keys().cloned().collect(),
                committed: false,
            },
        );
    }

    /// Marks one actor done; `Ok(true)` exactly once, when the last actor
    /// reports. Duplicate reports are ignored.
    pub fn report_actor_complete(
        &mut self,
        bid: u64,
        actor: &ActorId,
    ) -> Result<bool, TrackerError> {
        let status = self.batches.get_mut(&bid).ok_or(TrackerError::UnknownBatch(bid))?;
        if status.committed || !status.pending_actors.remove(actor) {
            return Ok(false);
        }
        if status.pending_actors.is_empty() {
            status.committed = true;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn is_committed(&self, bid: u64) -> bool {
        self.batches.get(&bid).map(|s| s.committed).unwrap_or(false)
    }

    pub fn status(&self, bid: u64) -> Option<&BatchStatus> {
        self.batches.get(&bid)
    }

    /// Drops a fully committed batch's bookkeeping.
    pub fn forget(&mut self, bid: u64) {
        self.batches.remove(&bid);
    }
}
