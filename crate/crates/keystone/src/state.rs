//! Transaction-local state views and master actor state.
//!
//! A transaction never touches an actor's master state directly. Every key
//! it acquires is copied into its own [`DictionaryState`] together with the
//! key's dependency records; reads and writes go through that view and are
//! recorded in an operation log with before- and after-images. At commit
//! the log is applied to the master [`ActorState`] via [`apply_committed`],
//! and the same log is what the write-ahead store persists and what the
//! dependency engine scans to decide which operations must be forwarded to
//! other actors.

use crate::deps::DependencyRecord;
use crate::error::StateError;
use crate::types::{AccessMode, Key, TxnContext};
use crate::value::Value;
use indexmap::IndexMap;
use std::collections::{BTreeMap, HashMap};

/// One logged state operation. Put and Delete carry the images needed for
/// incremental logging and forwarding; dependency registration changes are
/// logged so that commit replays reconstruct the records exactly.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum LoggedOp {
    Put {
        key: Key,
        /// Image before the write; `None` when the put inserted the key.
        before: Option<Value>,
        after: Value,
    },
    Delete {
        key: Key,
        before: Value,
    },
    RegisterDep {
        /// The local key the record is attached to (leader key on the
        /// leader actor, follower key on the follower actor).
        key: Key,
        dep: DependencyRecord,
    },
    DeregisterDep {
        key: Key,
        dep: DependencyRecord,
    },
}

impl LoggedOp {
    pub fn key(&self) -> &Key {
        match self {
            LoggedOp::Put { key, .. }
            | LoggedOp::Delete { key, .. }
            | LoggedOp::RegisterDep { key, .. }
            | LoggedOp::DeregisterDep { key, .. } => key,
        }
    }
}

/// A log entry: operation plus its position within the transaction's log
/// on this actor.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OpLogEntry {
    pub seq: u32,
    pub op: LoggedOp,
}

#[derive(Clone, Debug)]
struct EntrySlot {
    value: Option<Value>,
    mode: AccessMode,
}

/// The transaction-local view of one actor's state: exactly one per
/// (transaction, actor). Holds copies of the acquired keys, the dependency
/// records that came with them, and the operation log produced so far.
/// Reads observe the transaction's own writes; nothing here reaches master
/// state until commit.
#[derive(Clone, Debug)]
pub struct DictionaryState {
    ctx: TxnContext,
    /// Actor-level grants cover the whole actor; keys are still
    /// materialized into `entries` on first touch by the runtime.
    whole_actor: bool,
    entries: IndexMap<Key, EntrySlot>,
    /// Dependency records exactly as copied at acquisition time. The live
    /// view is this map folded through the log, so forwarding can
    /// reconstruct the records as of any log position.
    acquired_deps: HashMap<Key, Vec<DependencyRecord>>,
    log: Vec<OpLogEntry>,
    /// Log index up to which forwarding has already run.
    forwarded: usize,
}

impl DictionaryState {
    pub fn new(ctx: TxnContext) -> Self {
        Self::with_scope(ctx, false)
    }

    /// View for an actor-level grant: every key of the actor is considered
    /// acquired (read-write) and gets materialized on first touch.
    pub fn whole_actor(ctx: TxnContext) -> Self {
        Self::with_scope(ctx, true)
    }

    fn with_scope(ctx: TxnContext, whole_actor: bool) -> Self {
        DictionaryState {
            ctx,
            whole_actor,
            entries: IndexMap::new(),
            acquired_deps: HashMap::new(),
            log: Vec::new(),
            forwarded: 0,
        }
    }

    pub fn ctx(&self) -> TxnContext {
        self.ctx
    }

    pub fn is_whole_actor(&self) -> bool {
        self.whole_actor
    }

    pub fn is_acquired(&self, key: &Key) -> bool {
        self.entries.contains_key(key)
    }

    /// Copies a key (value and dependency records) into the view.
    /// Re-acquiring an already-held key keeps the local, possibly modified
    /// slot untouched; a read-write re-request upgrades a read-only slot.
    pub fn acquire(
        &mut self,
        key: Key,
        mode: AccessMode,
        value: Option<Value>,
        deps: Vec<DependencyRecord>,
    ) {
        match self.entries.get_mut(&key) {
            Some(slot) => {
                if mode == AccessMode::ReadWrite {
                    slot.mode = AccessMode::ReadWrite;
                }
            }
            None => {
                self.entries.insert(key.clone(), EntrySlot { value, mode });
                if !deps.is_empty() {
                    self.acquired_deps.insert(key, deps);
                }
            }
        }
    }

    /// Keys acquired so far, in acquisition order.
    pub fn acquired_keys(&self) -> impl Iterator<Item = &Key> {
        self.entries.keys()
    }

    pub fn get(&self, key: &Key) -> Result<Option<&Value>, StateError> {
        match self.entries.get(key) {
            Some(slot) => Ok(slot.value.as_ref()),
            None => Err(StateError::KeyNotAcquired(key.clone())),
        }
    }

    pub fn put(&mut self, key: Key, value: Value) -> Result<(), StateError> {
        let slot = self
            .entries
            .get_mut(&key)
            .ok_or_else(|| StateError::KeyNotAcquired(key.clone()))?;
        if slot.mode != AccessMode::ReadWrite {
            return Err(StateError::ReadOnlyAccess(key));
        }
        let before = slot.value.replace(value.clone());
        self.push(LoggedOp::Put { key, before, after: value });
        Ok(())
    }

    /// Deletes a key and de-registers every dependency record attached to
    /// it, in both roles. The delete is logged first, then one deregister
    /// per record in list order, so forwarding still sees the records when
    /// it reaches the delete.
    pub fn delete(&mut self, key: &Key) -> Result<(), StateError> {
        let slot = self
            .entries
            .get_mut(key)
            .ok_or_else(|| StateError::KeyNotAcquired(key.clone()))?;
        if slot.mode != AccessMode::ReadWrite {
            return Err(StateError::ReadOnlyAccess(key.clone()));
        }
        let before = slot
            .value
            .take()
            .ok_or_else(|| StateError::KeyAbsent(key.clone()))?;
        self.push(LoggedOp::Delete { key: key.clone(), before });
        for dep in self.live_records(key) {
            self.push(LoggedOp::DeregisterDep { key: key.clone(), dep });
        }
        Ok(())
    }

    /// Attaches a dependency record to a local key. The caller (the
    /// registration protocol) is responsible for eligibility and duplicate
    /// checks; this only records the change.
    pub fn add_dep_record(&mut self, key: Key, dep: DependencyRecord) -> Result<(), StateError> {
        let slot = self
            .entries
            .get(&key)
            .ok_or_else(|| StateError::KeyNotAcquired(key.clone()))?;
        if slot.mode != AccessMode::ReadWrite {
            return Err(StateError::ReadOnlyAccess(key));
        }
        debug_assert!(
            !self.live_records(&key).iter().any(|r| r.same_edge(&dep)),
            "duplicate dependency record attached to {key}"
        );
        self.push(LoggedOp::RegisterDep { key, dep });
        Ok(())
    }

    /// Removes a matching record from a local key, if present. Absent
    /// records are ignored without logging so that forwarded de-registers
    /// stay idempotent.
    pub fn remove_dep_record(
        &mut self,
        key: &Key,
        dep: &DependencyRecord,
    ) -> Result<bool, StateError> {
        if !self.is_acquired(key) {
            return Err(StateError::KeyNotAcquired(key.clone()));
        }
        let found = self.live_records(key).into_iter().find(|r| r.same_edge(dep));
        match found {
            Some(existing) => {
                self.push(LoggedOp::DeregisterDep { key: key.clone(), dep: existing });
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Dependency records of `key` as the transaction currently sees them:
    /// the acquired copies folded through the log.
    pub fn live_records(&self, key: &Key) -> Vec<DependencyRecord> {
        let mut records = self
            .acquired_deps
            .get(key)
            .cloned()
            .unwrap_or_default();
        fold_dep_ops(&mut records, key, &self.log);
        records
    }

    /// Dependency view of `key` as of log position `upto` (exclusive).
    pub fn records_at(&self, key: &Key, upto: usize) -> Vec<DependencyRecord> {
        let mut records = self
            .acquired_deps
            .get(key)
            .cloned()
            .unwrap_or_default();
        fold_dep_ops(&mut records, key, &self.log[..upto.min(self.log.len())]);
        records
    }

    pub fn ops(&self) -> &[OpLogEntry] {
        &self.log
    }

    /// Hands the not-yet-forwarded tail of the log to the forwarding
    /// driver and advances the watermark. Returns the starting log index
    /// alongside the entries, so the driver can reconstruct the dependency
    /// view in force at each position.
    pub fn take_unforwarded(&mut self) -> (usize, Vec<OpLogEntry>) {
        let start = self.forwarded;
        self.forwarded = self.log.len();
        (start, self.log[start..].to_vec())
    }

    fn push(&mut self, op: LoggedOp) {
        let seq = self.log.len() as u32;
        self.log.push(OpLogEntry { seq, op });
    }
}

/// Folds register/deregister entries for one key over a record list.
pub(crate) fn fold_dep_ops(records: &mut Vec<DependencyRecord>, key: &Key, ops: &[OpLogEntry]) {
    for entry in ops {
        match &entry.op {
            LoggedOp::RegisterDep { key: k, dep } if k == key => records.push(dep.clone()),
            LoggedOp::DeregisterDep { key: k, dep } if k == key => {
                if let Some(pos) = records.iter().position(|r| r.same_edge(dep)) {
                    records.remove(pos);
                }
            }
            _ => {}
        }
    }
}

/// Commit marker for [`apply_committed`]: the batch id and the highest
/// transaction id covered by the ops being applied (`bid` 0 for ACTs).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ApplyMarker {
    pub bid: u64,
    pub tid: u64,
}

impl ApplyMarker {
    pub fn batch(bid: u64, max_tid: u64) -> Self {
        ApplyMarker { bid, tid: max_tid }
    }

    pub fn act(tid: u64) -> Self {
        ApplyMarker { bid: 0, tid }
    }
}

/// An actor's master state: the authoritative key-value collection, the
/// dependency records attached to each key, and apply watermarks used to
/// reject replays of already-covered commits.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ActorState {
    pub kv: BTreeMap<Key, Value>,
    pub deps: BTreeMap<Key, Vec<DependencyRecord>>,
    pub last_applied_bid: u64,
    pub last_applied_tid: u64,
}

impl ActorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self, key: &Key) -> &[DependencyRecord] {
        self.deps.get(key).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Applies the log of a committed transaction (or completed batch, in tid
/// order) to master state. Batch markers must advance strictly; an ACT
/// marker is rejected only when it repeats the most recent one, since
/// independent ACTs may legitimately commit out of tid order on one actor.
pub fn apply_committed(
    state: &mut ActorState,
    marker: ApplyMarker,
    ops: &[OpLogEntry],
) -> Result<(), StateError> {
    if marker.bid > 0 {
        if marker.bid <= state.last_applied_bid {
            return Err(StateError::StaleApply {
                marker: marker.bid,
                last: state.last_applied_bid,
            });
        }
    } else if marker.tid == state.last_applied_tid {
        return Err(StateError::StaleApply {
            marker: marker.tid,
            last: state.last_applied_tid,
        });
    }

    fold_ops(state, ops);

    state.last_applied_bid = state.last_applied_bid.max(marker.bid);
    state.last_applied_tid = marker.tid;
    Ok(())
}

/// Applies ops to master state without watermark bookkeeping. Exposed for
/// the unprotected execution path, which has no commit markers.
pub fn fold_ops(state: &mut ActorState, ops: &[OpLogEntry]) {
    for entry in ops {
        match &entry.op {
            LoggedOp::Put { key, after, .. } => {
                state.kv.insert(key.clone(), after.clone());
            }
            LoggedOp::Delete { key, .. } => {
                state.kv.remove(key);
            }
            LoggedOp::RegisterDep { key, dep } => {
                let records = state.deps.entry(key.clone()).or_default();
                if !records.iter().any(|r| r.same_edge(dep)) {
                    records.push(dep.clone());
                }
            }
            LoggedOp::DeregisterDep { key, dep } => {
                if let Some(records) = state.deps.get_mut(key) {
                    records.retain(|r| !r.same_edge(dep));
                    if records.is_empty() {
                        state.deps.remove(key);
                    }
                }
            }
        }
    }
}
