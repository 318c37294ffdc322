//! Per-actor cells: master state, batch progress, and the lock table.
//!
//! A cell's metadata is mutated under a short mutex held across no await
//! point. Tasks that need to wait (for a schedule turn, a lock, or a
//! predecessor batch) register on the cell's notifier, re-check their
//! condition, and sleep; every state change that can unblock someone fires
//! `notify_waiters`.
//!
//! Batch commit is two-step. When the last scheduled transaction finishes
//! on this actor the cell reports "ready" to the coordinator and keeps the
//! buffered operations; only the coordinator's confirmation — sent once
//! every transaction of the batch has finished on every actor — persists
//! the batch record and applies it to master state. The buffer step is
//! what lets a whole batch be thrown away when any member fails anywhere,
//! even after other members finished their share here.
//!
//! Coexistence of the two transaction paths on one actor is ordered by the
//! single id counter shared by transaction and batch ids:
//!
//! * a lock-based transaction `t` may start touching the actor only when
//!   no scheduled batch ordered before it is outstanding here and no batch
//!   ordered after it has started here — otherwise it aborts and retries
//!   under a fresh id;
//! * a batch may start its turns only when no lock-based transaction is
//!   still touching the actor. All such touchers have smaller ids, so this
//!   wait runs young-waits-for-old and cannot close a cycle against the
//!   wait-die lock order, which lets only old wait for young and never
//!   crosses into the scheduled path.

use crate::act::{Acquire, LockTable, LockTarget};
use crate::deps::DependencyRecord;
use crate::error::{AbortCause, TxnError};
use crate::pact::BatchSchedule;
use crate::state::{
    apply_committed, fold_dep_ops, fold_ops, ActorState, ApplyMarker, DictionaryState, LoggedOp,
    OpLogEntry,
};
use crate::types::{AccessMode, ActorId, Granularity, Key};
use crate::value::Value;
use crate::wal::{snapshot_of, to_wire_ops, LogMode, LogStore};
use parking_lot::Mutex;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;
use tokio::sync::Notify;

/// Progress of one batch on one actor.
struct BatchRun {
    schedule: Arc<BatchSchedule>,
    prev_bid: u64,
    /// Remaining declared activations per transaction.
    remaining: HashMap<u64, u32>,
    /// Currently running activations per transaction (self-calls nest).
    active: HashMap<u64, u32>,
    /// Transactions that are done on this actor (ops buffered).
    finished: HashMap<u64, bool>,
    done_ops: HashMap<u64, Vec<OpLogEntry>>,
    started: bool,
    failed: bool,
    ready_sent: bool,
}

impl BatchRun {
    fn new(schedule: Arc<BatchSchedule>, me: &ActorId) -> Self {
        let part = &schedule.actors[me];
        let mut remaining = HashMap::new();
        let mut finished = HashMap::new();
        for slot in &part.txn_order {
            remaining.insert(slot.tid, slot.count);
            finished.insert(slot.tid, false);
        }
        BatchRun {
            prev_bid: part.prev_bid,
            schedule,
            remaining,
            active: HashMap::new(),
            finished,
            done_ops: HashMap::new(),
            started: false,
            failed: false,
            ready_sent: false,
        }
    }

    fn is_finished(&self, tid: u64) -> bool {
        self.finished.get(&tid).copied().unwrap_or(false)
    }

    /// True when every transaction ordered before `tid` in `order` is done
    /// on this actor; false when `tid` does not appear at all.
    fn turn_of(&self, order: &[u64], tid: u64) -> bool {
        for &t in order {
            if t == tid {
                return true;
            }
            if !self.is_finished(t) {
                return false;
            }
        }
        false
    }

    fn all_finished(&self) -> bool {
        self.finished.values().all(|&f| f)
    }

    /// Flips the one-shot ready latch when everything is finished.
    fn flip_ready(&mut self) -> bool {
        if !self.failed && !self.ready_sent && self.all_finished() {
            self.ready_sent = true;
            true
        } else {
            false
        }
    }
}

struct ActorInner {
    master: ActorState,
    /// Scheduled batches not yet applied or discarded, by bid.
    batches: BTreeMap<u64, BatchRun>,
    /// Highest bid applied or discarded here; batches chain on it.
    completed_tip: u64,
    locks: LockTable,
    /// Lock-based transactions currently touching this actor.
    touchers: HashSet<u64>,
}

/// A confirmed batch application on this actor: the log record is durable
/// per the flush policy and master state includes the batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchDone {
    #[allow(dead_code)]
    pub bid: u64,
    pub persisted_at: Instant,
}

/// Poll result for a parked lock request.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum LockPoll {
    Holds,
    Waiting,
    /// Neither held nor queued: the wait was killed (wait-die eviction).
    Dead,
}

pub(crate) struct ActorCell {
    pub(crate) id: ActorId,
    #[allow(dead_code)]
    pub(crate) mode: Granularity,
    pub(crate) notify: Notify,
    log: Arc<LogStore>,
    inner: Mutex<ActorInner>,
}

fn undeclared(tid: u64, actor: &ActorId, detail: impl Into<String>) -> TxnError {
    TxnError::UndeclaredAccess { tid, actor: actor.clone(), detail: detail.into() }
}

fn fence_abort(tid: u64) -> TxnError {
    TxnError::Aborted { tid, cause: AbortCause::Die }
}

impl ActorCell {
    pub(crate) fn new(id: ActorId, mode: Granularity, log: Arc<LogStore>) -> Self {
        ActorCell {
            id,
            mode,
            notify: Notify::new(),
            log,
            inner: Mutex::new(ActorInner {
                master: ActorState::new(),
                batches: BTreeMap::new(),
                completed_tip: 0,
                locks: LockTable::new(),
                touchers: HashSet::new(),
            }),
        }
    }

    /// Installs seed data directly into master state, stamped with the
    /// genesis batch id so live watermarks and replayed ones line up.
    pub(crate) fn seed(
        &self,
        kv: Vec<(Key, Value)>,
        deps: Vec<(Key, DependencyRecord)>,
        genesis_bid: u64,
    ) {
        let mut inner = self.inner.lock();
        for (k, v) in kv {
            inner.master.kv.insert(k, v);
        }
        for (k, d) in deps {
            let records = inner.master.deps.entry(k).or_default();
            if !records.iter().any(|r| r.same_edge(&d)) {
                records.push(d);
            }
        }
        inner.master.last_applied_bid = genesis_bid;
        inner.completed_tip = inner.completed_tip.max(genesis_bid);
        drop(inner);
        self.notify.notify_waiters();
    }

    pub(crate) fn master_snapshot(&self) -> ActorState {
        self.inner.lock().master.clone()
    }

    // ------------------------------------------------------------------
    // Scheduled (batch) path
    // ------------------------------------------------------------------

    pub(crate) fn deliver_schedule(&self, schedule: Arc<BatchSchedule>) {
        let run = BatchRun::new(schedule.clone(), &self.id);
        let mut inner = self.inner.lock();
        inner.batches.insert(schedule.bid, run);
        drop(inner);
        self.notify.notify_waiters();
    }

    /// Activation entry: consumes one declared access. Fatal for the whole
    /// batch when the transaction was not declared here or overran its
    /// declared count.
    pub(crate) fn pact_enter(&self, bid: u64, tid: u64) -> Result<(), TxnError> {
        let mut inner = self.inner.lock();
        let run = inner
            .batches
            .get_mut(&bid)
            .ok_or_else(|| undeclared(tid, &self.id, "actor not in the transaction's batch"))?;
        if run.failed {
            return Err(TxnError::Aborted { tid, cause: AbortCause::BatchFailed });
        }
        let remaining = run
            .remaining
            .get_mut(&tid)
            .ok_or_else(|| undeclared(tid, &self.id, "actor not declared by this transaction"))?;
        if *remaining == 0 {
            return Err(undeclared(tid, &self.id, "declared access count exhausted"));
        }
        *remaining -= 1;
        *run.active.entry(tid).or_insert(0) += 1;
        Ok(())
    }

    /// Activation exit. When this was the transaction's last declared
    /// activation here, its buffered ops become visible to successors and
    /// its turn passes on. Returns whether the whole actor just became
    /// ready (all scheduled transactions finished) — the caller reports
    /// that to the coordinator.
    pub(crate) fn pact_exit(
        &self,
        bid: u64,
        tid: u64,
        ops: impl FnOnce() -> Vec<OpLogEntry>,
    ) -> bool {
        let mut inner = self.inner.lock();
        let Some(run) = inner.batches.get_mut(&bid) else { return false };
        let active = run.active.entry(tid).or_insert(1);
        *active = active.saturating_sub(1);
        let finished_now = !run.failed
            && *active == 0
            && run.remaining.get(&tid).copied() == Some(0)
            && !run.is_finished(tid);
        let mut ready = false;
        if finished_now {
            run.finished.insert(tid, true);
            run.done_ops.insert(tid, ops());
            ready = run.flip_ready();
        }
        drop(inner);
        if finished_now {
            self.notify.notify_waiters();
        }
        ready
    }

    /// Marks the transaction finished here once its whole logic completed,
    /// for transactions that declared more accesses than they performed
    /// (the count-drain path in [`Self::pact_exit`] never fires for them).
    /// Same readiness return as `pact_exit`.
    pub(crate) fn pact_logic_done(
        &self,
        bid: u64,
        tid: u64,
        ops: impl FnOnce() -> Vec<OpLogEntry>,
    ) -> Result<bool, TxnError> {
        let mut inner = self.inner.lock();
        let Some(run) = inner.batches.get_mut(&bid) else { return Ok(false) };
        if run.failed {
            return Err(TxnError::Aborted { tid, cause: AbortCause::BatchFailed });
        }
        if run.is_finished(tid) {
            return Ok(false);
        }
        debug_assert_eq!(
            run.active.get(&tid).copied().unwrap_or(0),
            0,
            "logic end with an activation still on the stack"
        );
        run.finished.insert(tid, true);
        run.done_ops.insert(tid, ops());
        let ready = run.flip_ready();
        drop(inner);
        self.notify.notify_waiters();
        Ok(ready)
    }

    /// One poll of a whole-actor turn (actor-level granularity): Ok(true)
    /// once the batch may run here and every earlier transaction of the
    /// batch is done on this actor.
    pub(crate) fn pact_poll_actor_turn(&self, bid: u64, tid: u64) -> Result<bool, TxnError> {
        let mut inner = self.inner.lock();
        let completed_tip = inner.completed_tip;
        let touchers_clear = inner.touchers.is_empty();
        let run = inner
            .batches
            .get_mut(&bid)
            .ok_or_else(|| undeclared(tid, &self.id, "actor not in the transaction's batch"))?;
        if run.failed {
            return Err(TxnError::Aborted { tid, cause: AbortCause::BatchFailed });
        }
        if completed_tip < run.prev_bid || !touchers_clear {
            return Ok(false);
        }
        let part = &run.schedule.actors[&self.id];
        if !part.txn_order.iter().any(|s| s.tid == tid) {
            return Err(undeclared(tid, &self.id, "transaction not in actor schedule"));
        }
        let order: Vec<u64> = part.txn_order.iter().map(|s| s.tid).collect();
        if !run.turn_of(&order, tid) {
            return Ok(false);
        }
        run.started = true;
        Ok(true)
    }

    /// One poll of a key-set turn (key-level granularity). Once every
    /// requested key's per-key schedule has reached this transaction, the
    /// keys are copied into the view — master state folded with the
    /// buffered ops of the predecessors on each key — and the poll returns
    /// Ok(true). `keys` carries the transaction's own declared modes.
    pub(crate) fn pact_poll_keys(
        &self,
        bid: u64,
        tid: u64,
        keys: &[(Key, AccessMode)],
        view: &mut DictionaryState,
    ) -> Result<bool, TxnError> {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let completed_tip = inner.completed_tip;
        let touchers_clear = inner.touchers.is_empty();
        let run = inner
            .batches
            .get_mut(&bid)
            .ok_or_else(|| undeclared(tid, &self.id, "actor not in the transaction's batch"))?;
        if run.failed {
            return Err(TxnError::Aborted { tid, cause: AbortCause::BatchFailed });
        }
        {
            let part = &run.schedule.actors[&self.id];
            for (key, want) in keys {
                let declared = part.key_modes.get(key).copied().ok_or_else(|| {
                    undeclared(tid, &self.id, format!("key {key} not declared for this batch"))
                })?;
                let in_list = part.per_key.get(key).map(|l| l.contains(&tid)).unwrap_or(false);
                if !in_list {
                    return Err(undeclared(
                        tid,
                        &self.id,
                        format!("key {key} not declared by this transaction"),
                    ));
                }
                if *want == AccessMode::ReadWrite && declared == AccessMode::Read {
                    return Err(undeclared(
                        tid,
                        &self.id,
                        format!("write access to read-declared key {key}"),
                    ));
                }
            }
            if completed_tip < run.prev_bid || !touchers_clear {
                return Ok(false);
            }
            for (key, _) in keys {
                if !run.turn_of(&part.per_key[key], tid) {
                    return Ok(false);
                }
            }
        }
        run.started = true;
        let part = &run.schedule.actors[&self.id];
        for (key, want) in keys {
            if view.is_acquired(key) {
                continue;
            }
            let list = &part.per_key[key];
            let (value, deps) = folded_key_entry(&inner.master, run, list, tid, key);
            view.acquire(key.clone(), *want, value, deps);
        }
        Ok(true)
    }

    /// Copies one key into a whole-actor view on first touch, folding in
    /// the buffered ops of every batch predecessor.
    pub(crate) fn pact_materialize(
        &self,
        bid: u64,
        tid: u64,
        key: &Key,
        view: &mut DictionaryState,
    ) {
        if view.is_acquired(key) {
            return;
        }
        let inner = self.inner.lock();
        let (value, deps) = match inner.batches.get(&bid) {
            Some(run) => {
                let part = &run.schedule.actors[&self.id];
                let order: Vec<u64> = part.txn_order.iter().map(|s| s.tid).collect();
                folded_key_entry(&inner.master, run, &order, tid, key)
            }
            None => (inner.master.kv.get(key).cloned(), inner.master.records(key).to_vec()),
        };
        drop(inner);
        view.acquire(key.clone(), AccessMode::ReadWrite, value, deps);
    }

    /// Keys visible to a whole-actor scheduled transaction: master keys
    /// folded with predecessor ops and the transaction's own log.
    pub(crate) fn pact_visible_keys(&self, bid: u64, tid: u64, view: &DictionaryState) -> Vec<Key> {
        let inner = self.inner.lock();
        let mut set: BTreeSet<Key> = inner.master.kv.keys().cloned().collect();
        if let Some(run) = inner.batches.get(&bid) {
            let part = &run.schedule.actors[&self.id];
            for slot in &part.txn_order {
                if slot.tid >= tid {
                    break;
                }
                if let Some(ops) = run.done_ops.get(&slot.tid) {
                    fold_keys(&mut set, ops);
                }
            }
        }
        drop(inner);
        fold_keys(&mut set, view.ops());
        set.into_iter().collect()
    }

    /// Coordinator-confirmed batch application: one log record with every
    /// member's ops in transaction order, then the master-state apply.
    /// `None` when the batch is unknown or marked failed here.
    pub(crate) fn commit_batch(&self, bid: u64) -> Result<Option<BatchDone>, TxnError> {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let run = match inner.batches.get(&bid) {
            Some(run) if !run.failed => run,
            _ => return Ok(None),
        };
        debug_assert!(run.all_finished(), "commit of an unfinished batch");
        let part = &run.schedule.actors[&self.id];
        let mut ops: Vec<OpLogEntry> = Vec::new();
        let mut max_tid = 0;
        for slot in &part.txn_order {
            max_tid = max_tid.max(slot.tid);
            if let Some(txn_ops) = run.done_ops.get(&slot.tid) {
                ops.extend(txn_ops.iter().cloned());
            }
        }
        let marker = ApplyMarker::batch(bid, max_tid);
        persist_and_apply(&self.log, &self.id, inner, max_tid, bid, marker, &ops)?;
        let persisted_at = Instant::now();
        inner.completed_tip = inner.completed_tip.max(bid);
        inner.batches.remove(&bid);
        for entry in &ops {
            match &entry.op {
                LoggedOp::Delete { key, .. } => inner.locks.mark_deleted(key),
                LoggedOp::Put { key, .. } => inner.locks.clear_deleted(key),
                _ => {}
            }
        }
        drop(guard);
        self.notify.notify_waiters();
        Ok(Some(BatchDone { bid, persisted_at }))
    }

    /// Marks a batch failed: no further turns are granted, waiting members
    /// see the failure, nothing will be logged or applied.
    pub(crate) fn fail_batch(&self, bid: u64) {
        let mut inner = self.inner.lock();
        if let Some(run) = inner.batches.get_mut(&bid) {
            run.failed = true;
        }
        drop(inner);
        self.notify.notify_waiters();
    }

    /// Removes a failed batch and advances the chain past it.
    pub(crate) fn discard_batch(&self, bid: u64) {
        let mut inner = self.inner.lock();
        if inner.batches.remove(&bid).is_some() {
            inner.completed_tip = inner.completed_tip.max(bid);
        }
        drop(inner);
        self.notify.notify_waiters();
    }

    // ------------------------------------------------------------------
    // Lock-based path
    // ------------------------------------------------------------------

    /// Admission check for a lock-based transaction's first touch of this
    /// actor. Aborts (for retry under a fresh id) whenever scheduled work
    /// ordered before it is outstanding here, or work ordered after it has
    /// already started or applied here. Aborting instead of waiting is
    /// what keeps the two paths' waits jointly acyclic.
    pub(crate) fn act_first_touch(&self, tid: u64) -> Result<(), TxnError> {
        let mut inner = self.inner.lock();
        if inner.touchers.contains(&tid) {
            return Ok(());
        }
        if inner.completed_tip > tid {
            return Err(fence_abort(tid));
        }
        for (&bid, run) in &inner.batches {
            if bid < tid || run.started {
                return Err(fence_abort(tid));
            }
        }
        inner.touchers.insert(tid);
        Ok(())
    }

    pub(crate) fn act_acquire(&self, tid: u64, target: LockTarget, mode: AccessMode) -> Acquire {
        let mut inner = self.inner.lock();
        debug_assert!(inner.touchers.contains(&tid), "lock request before admission");
        let outcome = inner.locks.acquire(tid, target, mode);
        // A grant may have evicted queued waiters; they discover it on
        // wake-up via `act_poll`.
        let _ = inner.locks.take_evicted();
        drop(inner);
        if outcome == Acquire::Granted {
            self.notify.notify_waiters();
        }
        outcome
    }

    pub(crate) fn act_poll(&self, tid: u64, target: &LockTarget) -> LockPoll {
        let inner = self.inner.lock();
        if inner.locks.holds(tid, target) {
            LockPoll::Holds
        } else if inner.locks.is_waiting(tid, target) {
            LockPoll::Waiting
        } else {
            LockPoll::Dead
        }
    }

    /// Copies a key out of master state for a lock-based transaction. The
    /// admission fence guarantees master reflects exactly the batches
    /// ordered before this transaction.
    pub(crate) fn act_copy(&self, key: &Key) -> (Option<Value>, Vec<DependencyRecord>) {
        let inner = self.inner.lock();
        (inner.master.kv.get(key).cloned(), inner.master.records(key).to_vec())
    }

    pub(crate) fn act_visible_keys(&self, view: &DictionaryState) -> Vec<Key> {
        let inner = self.inner.lock();
        let mut set: BTreeSet<Key> = inner.master.kv.keys().cloned().collect();
        drop(inner);
        fold_keys(&mut set, view.ops());
        set.into_iter().collect()
    }

    /// Commit-point work for one participant: persist the transaction's
    /// record (possibly op-less), apply it, release every lock, stop being
    /// a toucher.
    pub(crate) fn act_commit(&self, tid: u64, ops: &[OpLogEntry]) -> Result<(), TxnError> {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let marker = ApplyMarker::act(tid);
        persist_and_apply(&self.log, &self.id, inner, tid, 0, marker, ops)?;
        for entry in ops {
            match &entry.op {
                LoggedOp::Delete { key, .. } => inner.locks.mark_deleted(key),
                LoggedOp::Put { key, .. } => inner.locks.clear_deleted(key),
                _ => {}
            }
        }
        inner.locks.release_all(tid);
        let _ = inner.locks.take_evicted();
        inner.touchers.remove(&tid);
        drop(guard);
        self.notify.notify_waiters();
        Ok(())
    }

    /// Abort-point work for one participant: drop every hold and wait of
    /// the transaction without touching master state or the log.
    pub(crate) fn act_abort(&self, tid: u64) {
        let mut inner = self.inner.lock();
        inner.locks.release_all(tid);
        let _ = inner.locks.take_evicted();
        inner.touchers.remove(&tid);
        drop(inner);
        self.notify.notify_waiters();
    }

    /// Lock-table sanity: every wait edge points from an older transaction
    /// to a younger holder.
    #[cfg(test)]
    pub(crate) fn lock_invariants_hold(&self) -> bool {
        self.inner.lock().locks.wait_edges_are_old_to_young()
    }

    // ------------------------------------------------------------------
    // Unprotected path
    // ------------------------------------------------------------------

    pub(crate) fn non_txn_copy(&self, key: &Key) -> (Option<Value>, Vec<DependencyRecord>) {
        self.act_copy(key)
    }

    pub(crate) fn non_txn_visible_keys(&self, view: &DictionaryState) -> Vec<Key> {
        self.act_visible_keys(view)
    }

    /// Applies ops straight onto master state: no marker, no log, no
    /// atomicity. Baseline mode only.
    pub(crate) fn non_txn_apply(&self, ops: &[OpLogEntry]) {
        let mut inner = self.inner.lock();
        fold_ops(&mut inner.master, ops);
        drop(inner);
        self.notify.notify_waiters();
    }
}

/// Log-then-apply with no partial effect on failure. In snapshot mode the
/// post-state is built aside, persisted, then swapped in; in incremental
/// mode the ops are appended before the apply.
fn persist_and_apply(
    log: &LogStore,
    actor: &ActorId,
    inner: &mut ActorInner,
    tid: u64,
    bid: u64,
    marker: ApplyMarker,
    ops: &[OpLogEntry],
) -> Result<(), TxnError> {
    match log.mode() {
        LogMode::Snapshot => {
            let mut post = inner.master.clone();
            apply_committed(&mut post, marker, ops).map_err(TxnError::State)?;
            log.append(actor, tid, bid, &[], || snapshot_of(&post))
                .map_err(|e| TxnError::LogWrite(e.to_string()))?;
            inner.master = post;
        }
        _ => {
            log.append(actor, tid, bid, &to_wire_ops(ops), || {
                unreachable!("snapshot builder outside snapshot mode")
            })
            .map_err(|e| TxnError::LogWrite(e.to_string()))?;
            apply_committed(&mut inner.master, marker, ops).map_err(TxnError::State)?;
        }
    }
    Ok(())
}

/// Master value and dependency records of `key`, folded with the buffered
/// ops of every transaction ordered before `tid` in `order`.
fn folded_key_entry(
    master: &ActorState,
    run: &BatchRun,
    order: &[u64],
    tid: u64,
    key: &Key,
) -> (Option<Value>, Vec<DependencyRecord>) {
    let mut value = master.kv.get(key).cloned();
    let mut deps = master.records(key).to_vec();
    for &t in order {
        if t >= tid {
            break;
        }
        let Some(ops) = run.done_ops.get(&t) else { continue };
        for entry in ops {
            match &entry.op {
                LoggedOp::Put { key: k, after, .. } if k == key => value = Some(after.clone()),
                LoggedOp::Delete { key: k, .. } if k == key => value = None,
                _ => {}
            }
        }
        fold_dep_ops(&mut deps, key, ops);
    }
    (value, deps)
}

/// Folds Put/Delete entries into a key set.
fn fold_keys(set: &mut BTreeSet<Key>, ops: &[OpLogEntry]) {
    for entry in ops {
        match &entry.op {
            LoggedOp::Put { key, .. } => {
                set.insert(key.clone());
            }
            LoggedOp::Delete { key, .. } => {
                set.remove(key);
            }
            _ => {}
        }
    }
}
