//! Transaction tasks and the method execution context.
//!
//! Every transaction runs as one tokio task. The task activates the root
//! actor, runs the registered method body against per-actor dictionary
//! views, resolves dependency forwards to a fixed point, and then drives
//! its path's commit protocol: scheduled transactions report readiness and
//! wait for the coordinator's batch confirmation; lock-based transactions
//! run two-phase commit over every touched actor; unprotected runs apply
//! as they go.
//!
//! Method bodies are plain functions returning a boxed future:
//!
//! ```ignore
//! fn deposit<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
//!     Box::pin(async move {
//!         let key = Key::new("acct", "a1");
//!         let old = ctx.get(&key).await?.and_then(|v| v.as_int()).unwrap_or(0);
//!         ctx.put(key, Value::Int(old + 1)).await?;
//!         Ok(Value::Int(old + 1))
//!     })
//! }
//! // registration: GroupBuilder::new("account", 4).method("deposit", method_fn(deposit))
//! ```

use crate::act::{Acquire, LockTarget, Phase, TwoPhaseState};
use crate::deps::{
    apply_forwarded_ops, check_follower_eligibility, check_leader_eligibility, resolve_forwards,
    seed_follower, DependencyRecord, ForwardedOp,
};
use crate::error::{AbortCause, DepError, StateError, TxnError};
use crate::metrics::{Breakpoint, Timeline, TxnKind};
use crate::pact::AccessSpec;
use crate::runtime::cell::{ActorCell, LockPoll};
use crate::runtime::cluster::{BatchSignal, ClusterInner, CoordMsg, PactJob, SignalOutcome};
use crate::state::DictionaryState;
use crate::types::{AccessMode, ActorId, Granularity, Key, TxnContext};
use crate::value::Value;
use indexmap::IndexMap;
use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;
use tokio::sync::oneshot;

/// Boxed future tied to the context borrow of a method body.
pub type BoxFut<'a, T> = Pin<Box<dyn Future<Output = T> + Send + 'a>>;

/// A registered actor method.
pub type MethodFn =
    Arc<dyn for<'a> Fn(&'a mut MethodCtx, Value) -> BoxFut<'a, Result<Value, TxnError>> + Send + Sync>;

/// Wraps a method body (see the module example) as a registrable method.
pub fn method_fn<F>(f: F) -> MethodFn
where
    F: for<'a> Fn(&'a mut MethodCtx, Value) -> BoxFut<'a, Result<Value, TxnError>>
        + Send
        + Sync
        + 'static,
{
    Arc::new(f)
}

/// Maximum nesting of actor activations (calls and forwards).
const MAX_CALL_DEPTH: usize = 16;
/// Safety cap on total forward activations per transaction; dependency
/// semantics terminate on their own, this bounds runaway configurations.
const MAX_FORWARD_ACTIVATIONS: u32 = 4096;

#[derive(Clone, Copy, PartialEq, Eq)]
enum ExecPath {
    Pact,
    Act,
    NonTxn,
}

enum Activation {
    Method { method: String, args: Value },
    Forward(Vec<ForwardedOp>),
    /// Leader-side half of a dependency registration; returns the leader
    /// value the follower seeds from.
    Register { record: DependencyRecord },
    /// Leader-side half of a deregistration; returns 1 if removed.
    Deregister { record: DependencyRecord },
}

/// Wakes on the cell's notifier until `poll` yields a value or an error.
/// Interest is registered before each poll so no notification is lost.
async fn wait_cell<T>(
    cell: &ActorCell,
    mut poll: impl FnMut() -> Result<Option<T>, TxnError>,
) -> Result<T, TxnError> {
    loop {
        let notified = cell.notify.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        if let Some(v) = poll()? {
            return Ok(v);
        }
        notified.await;
    }
}

/// Execution context handed to method bodies: the transaction's identity
/// plus its per-actor views, with every state access routed through the
/// active path's concurrency control.
pub struct MethodCtx {
    inner: Arc<ClusterInner>,
    path: ExecPath,
    ctx: TxnContext,
    /// Declared accesses (scheduled path only; empty otherwise).
    spec: AccessSpec,
    views: IndexMap<ActorId, DictionaryState>,
    stack: Vec<ActorId>,
    /// Lock modes this transaction holds, by (actor, key) — the key is
    /// `None` for whole-actor locks.
    act_locks: HashMap<(ActorId, Option<Key>), AccessMode>,
    pending_forwards: VecDeque<(ActorId, Vec<ForwardedOp>)>,
    timeline: Timeline,
}

impl MethodCtx {
    fn new(
        inner: Arc<ClusterInner>,
        path: ExecPath,
        ctx: TxnContext,
        spec: AccessSpec,
        timeline: Timeline,
    ) -> Self {
        MethodCtx {
            inner,
            path,
            ctx,
            spec,
            views: IndexMap::new(),
            stack: Vec::new(),
            act_locks: HashMap::new(),
            pending_forwards: VecDeque::new(),
            timeline,
        }
    }

    pub fn tid(&self) -> u64 {
        self.ctx.tid
    }

    /// Batch id for scheduled transactions, 0 otherwise.
    pub fn bid(&self) -> u64 {
        self.ctx.bid
    }

    pub fn is_pact(&self) -> bool {
        self.ctx.is_pact
    }

    pub fn granularity(&self) -> Granularity {
        self.ctx.granularity
    }

    /// The actor whose activation is currently executing.
    ///
    /// # Panics
    /// Outside an activation (method bodies are always inside one).
    pub fn current_actor(&self) -> &ActorId {
        self.stack.last().expect("no active actor activation")
    }

    /// Reads a key on the current actor.
    pub async fn get(&mut self, key: &Key) -> Result<Option<Value>, TxnError> {
        self.ensure_key(key.clone(), AccessMode::Read).await?;
        let view = self.views.get(self.current_actor()).expect("entered");
        Ok(view.get(key)?.cloned())
    }

    /// Writes a key on the current actor.
    pub async fn put(&mut self, key: Key, value: Value) -> Result<(), TxnError> {
        self.ensure_key(key.clone(), AccessMode::ReadWrite).await?;
        let actor = self.current_actor().clone();
        let view = self.views.get_mut(&actor).expect("entered");
        view.put(key, value)?;
        Ok(())
    }

    /// Deletes a key on the current actor; false when it was absent.
    /// Deleting also de-registers the key's dependency records, which the
    /// forwarding pass turns into cascades and cleanups on related actors.
    pub async fn delete(&mut self, key: &Key) -> Result<bool, TxnError> {
        self.ensure_key(key.clone(), AccessMode::ReadWrite).await?;
        let actor = self.current_actor().clone();
        let view = self.views.get_mut(&actor).expect("entered");
        match view.delete(key) {
            Ok(()) => Ok(true),
            Err(StateError::KeyAbsent(_)) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Dependency records attached to a key, as this transaction sees them.
    pub async fn records(&mut self, key: &Key) -> Result<Vec<DependencyRecord>, TxnError> {
        self.ensure_key(key.clone(), AccessMode::Read).await?;
        let view = self.views.get(self.current_actor()).expect("entered");
        Ok(view.live_records(key))
    }

    /// Keys present on the current actor from this transaction's vantage
    /// point. Key-level scheduled transactions see their declared keys;
    /// key-level lock-based enumeration takes no whole-actor protection.
    pub async fn state_keys(&mut self) -> Result<Vec<Key>, TxnError> {
        let actor = self.current_actor().clone();
        let cell = self.inner.cell(&actor)?;
        if self.path == ExecPath::Act && self.ctx.granularity == Granularity::ActorLevel {
            self.act_lock(&cell, LockTarget::Actor, AccessMode::Read).await?;
        }
        let view = self.views.get(&actor).expect("entered");
        Ok(match self.path {
            ExecPath::Pact => match self.ctx.granularity {
                Granularity::ActorLevel => cell.pact_visible_keys(self.ctx.bid, self.ctx.tid, view),
                Granularity::KeyLevel => view.acquired_keys().cloned().collect(),
            },
            ExecPath::Act => cell.act_visible_keys(view),
            ExecPath::NonTxn => cell.non_txn_visible_keys(view),
        })
    }

    /// Calls a method on another actor (or this one) within the same
    /// transaction.
    pub async fn call_actor(
        &mut self,
        actor: ActorId,
        method: &str,
        args: Value,
    ) -> Result<Value, TxnError> {
        self.activate(actor, Activation::Method { method: method.to_string(), args }, false).await
    }

    /// Registers a dependency edge. Must run on the follower actor: the
    /// follower checks its own eligibility, the leader activation checks
    /// its side and attaches the forward record, then the follower stores
    /// the backward record and seeds or refreshes its value from the
    /// leader's.
    pub async fn register_dependency(&mut self, record: DependencyRecord) -> Result<(), TxnError> {
        let me = self.current_actor().clone();
        if record.follower_actor != me {
            return Err(TxnError::user("dependency registration must run on the follower actor"));
        }
        if record.dep_type == crate::deps::DepType::Update && record.function_id.is_none() {
            return Err(TxnError::user("update dependency needs a function id"));
        }
        self.ensure_key(record.follower_key.clone(), AccessMode::ReadWrite).await?;
        {
            let view = self.views.get(&me).expect("entered");
            let follower_records = view.live_records(&record.follower_key);
            check_follower_eligibility(
                &me,
                &follower_records,
                &record,
                self.inner.cycle_policy,
                &*self.inner,
            )?;
        }
        let leader_value = self
            .activate(
                record.leader_actor.clone(),
                Activation::Register { record: record.clone() },
                false,
            )
            .await?;
        let view = self.views.get_mut(&me).expect("entered");
        seed_follower(view, &self.inner.registry, &record, &leader_value)?;
        Ok(())
    }

    /// Removes a dependency edge from both sides. Must run on the follower
    /// actor; true when either side held the record.
    pub async fn deregister_dependency(
        &mut self,
        record: DependencyRecord,
    ) -> Result<bool, TxnError> {
        let me = self.current_actor().clone();
        if record.follower_actor != me {
            return Err(TxnError::user("dependency deregistration must run on the follower actor"));
        }
        self.ensure_key(record.follower_key.clone(), AccessMode::ReadWrite).await?;
        let removed_here = {
            let view = self.views.get_mut(&me).expect("entered");
            view.remove_dep_record(&record.follower_key, &record)?
        };
        let at_leader = self
            .activate(
                record.leader_actor.clone(),
                Activation::Deregister { record: record.clone() },
                false,
            )
            .await?;
        Ok(removed_here || at_leader != Value::Int(0))
    }

    // ------------------------------------------------------------------
    // Activation machinery
    // ------------------------------------------------------------------

    fn activate(
        &mut self,
        actor: ActorId,
        activation: Activation,
        is_root: bool,
    ) -> BoxFut<'_, Result<Value, TxnError>> {
        Box::pin(async move {
            if self.stack.len() >= MAX_CALL_DEPTH {
                return Err(TxnError::ForwardDepthExceeded(MAX_CALL_DEPTH as u32));
            }
            if let Some(latency) = self.inner.call_latency {
                tokio::time::sleep(latency).await;
            }
            let cell = self.inner.cell(&actor)?;
            self.enter(&cell, is_root).await?;
            self.stack.push(actor.clone());
            let mut result = self.execute(activation).await;
            if is_root {
                if result.is_ok() {
                    if let Err(e) = self.drive_forwards().await {
                        result = Err(e);
                    }
                }
                if result.is_ok() {
                    self.timeline.mark(Breakpoint::LogicDone);
                }
            }
            if result.is_ok() {
                if let Err(e) = self.flush_view() {
                    result = Err(e);
                }
            }
            self.stack.pop();
            self.exit(&actor, &cell);
            result
        })
    }

    /// Path-specific admission: consume a declared access and wait for the
    /// schedule turn (scheduled path) or pass the coexistence fence
    /// (lock-based path), then make sure a view exists.
    async fn enter(&mut self, cell: &Arc<ActorCell>, is_root: bool) -> Result<(), TxnError> {
        let actor = cell.id.clone();
        let (bid, tid, ctx) = (self.ctx.bid, self.ctx.tid, self.ctx);
        match self.path {
            ExecPath::Pact => {
                cell.pact_enter(bid, tid)?;
                match self.ctx.granularity {
                    Granularity::ActorLevel => {
                        wait_cell(cell, || {
                            cell.pact_poll_actor_turn(bid, tid).map(|g| g.then_some(()))
                        })
                        .await?;
                        if !self.views.contains_key(&actor) {
                            self.views.insert(actor.clone(), DictionaryState::whole_actor(ctx));
                        }
                    }
                    Granularity::KeyLevel => {
                        let declared: Vec<(Key, AccessMode)> = self
                            .spec
                            .get(&actor)
                            .and_then(|a| a.keys.as_ref())
                            .map(|m| m.iter().map(|(k, m)| (k.clone(), *m)).collect())
                            .unwrap_or_default();
                        let view = self
                            .views
                            .entry(actor.clone())
                            .or_insert_with(|| DictionaryState::new(ctx));
                        wait_cell(cell, || {
                            cell.pact_poll_keys(bid, tid, &declared, view).map(|g| g.then_some(()))
                        })
                        .await?;
                    }
                }
                if is_root {
                    self.timeline.mark(Breakpoint::TurnGranted);
                    self.timeline.mark(Breakpoint::StateReady);
                }
            }
            ExecPath::Act => {
                cell.act_first_touch(tid)?;
                if is_root {
                    self.timeline.mark(Breakpoint::TurnGranted);
                }
                if !self.views.contains_key(&actor) {
                    let view = match self.ctx.granularity {
                        Granularity::ActorLevel => DictionaryState::whole_actor(ctx),
                        Granularity::KeyLevel => DictionaryState::new(ctx),
                    };
                    self.views.insert(actor.clone(), view);
                }
            }
            ExecPath::NonTxn => {
                if !self.views.contains_key(&actor) {
                    self.views.insert(actor.clone(), DictionaryState::whole_actor(ctx));
                }
                if is_root {
                    self.timeline.mark(Breakpoint::TurnGranted);
                    self.timeline.mark(Breakpoint::StateReady);
                }
            }
        }
        Ok(())
    }

    async fn execute(&mut self, activation: Activation) -> Result<Value, TxnError> {
        match activation {
            Activation::Method { method, args } => {
                let group = self.current_actor().group.clone();
                let Some(f) = self.inner.methods.get(&(group.clone(), method.clone())).cloned()
                else {
                    return Err(TxnError::UnknownMethod { group, method });
                };
                f(self, args).await
            }
            Activation::Forward(ops) => {
                for op in &ops {
                    self.ensure_key(op.target_key().clone(), AccessMode::ReadWrite).await?;
                }
                let actor = self.current_actor().clone();
                let view = self.views.get_mut(&actor).expect("entered");
                apply_forwarded_ops(view, &self.inner.registry, &ops)?;
                Ok(Value::Int(0))
            }
            Activation::Register { record } => {
                self.ensure_key(record.leader_key.clone(), AccessMode::ReadWrite).await?;
                let actor = self.current_actor().clone();
                let policy = self.inner.cycle_policy;
                let view = self.views.get_mut(&actor).expect("entered");
                let exists = view.get(&record.leader_key)?.is_some();
                let leader_records = view.live_records(&record.leader_key);
                check_leader_eligibility(&actor, &leader_records, exists, &record, policy)?;
                view.add_dep_record(record.leader_key.clone(), record.clone())?;
                let value = view.get(&record.leader_key)?.cloned().ok_or_else(|| {
                    TxnError::Dep(DepError::LeaderKeyMissing(record.leader_key.clone()))
                })?;
                Ok(value)
            }
            Activation::Deregister { record } => {
                self.ensure_key(record.leader_key.clone(), AccessMode::ReadWrite).await?;
                let actor = self.current_actor().clone();
                let view = self.views.get_mut(&actor).expect("entered");
                let removed = view.remove_dep_record(&record.leader_key, &record)?;
                Ok(Value::Int(removed as i64))
            }
        }
    }

    /// Makes `key` usable on the current actor under `need`: schedule-turn
    /// copies for the scheduled path, lock acquisition (with wait-die
    /// waits) plus master copies for the lock-based path, plain copies for
    /// unprotected runs.
    async fn ensure_key(&mut self, key: Key, need: AccessMode) -> Result<(), TxnError> {
        let actor = self.current_actor().clone();
        let cell = self.inner.cell(&actor)?;
        match self.path {
            ExecPath::Pact => match self.ctx.granularity {
                Granularity::ActorLevel => {
                    let view = self.views.get_mut(&actor).expect("entered");
                    cell.pact_materialize(self.ctx.bid, self.ctx.tid, &key, view);
                    Ok(())
                }
                Granularity::KeyLevel => {
                    // Declared keys were copied at activation entry; a
                    // missing slot means an undeclared access.
                    let view = self.views.get(&actor).expect("entered");
                    if view.is_acquired(&key) {
                        Ok(())
                    } else {
                        Err(TxnError::UndeclaredAccess {
                            tid: self.ctx.tid,
                            actor,
                            detail: format!("key {key} not declared"),
                        })
                    }
                }
            },
            ExecPath::Act => {
                let (target, lock_key) = match self.ctx.granularity {
                    Granularity::ActorLevel => (LockTarget::Actor, None),
                    Granularity::KeyLevel => (LockTarget::Key(key.clone()), Some(key.clone())),
                };
                let held = self.act_locks.get(&(actor.clone(), lock_key.clone())).copied();
                let adequate = matches!(held, Some(AccessMode::ReadWrite))
                    || (need == AccessMode::Read && held.is_some());
                if !adequate {
                    // A fresh read wants Read; anything else (fresh write,
                    // or an upgrade of a read hold) wants ReadWrite.
                    let mode = if need == AccessMode::ReadWrite || held.is_some() {
                        AccessMode::ReadWrite
                    } else {
                        AccessMode::Read
                    };
                    self.act_lock(&cell, target, mode).await?;
                    self.act_locks.insert((actor.clone(), lock_key), mode);
                }
                let slot_mode = match self.ctx.granularity {
                    // Whole-actor views carry writable slots; write
                    // legality is enforced by the actor lock upgrade above.
                    Granularity::ActorLevel => AccessMode::ReadWrite,
                    Granularity::KeyLevel => self
                        .act_locks
                        .get(&(actor.clone(), Some(key.clone())))
                        .copied()
                        .expect("just ensured"),
                };
                let view = self.views.get_mut(&actor).expect("entered");
                if view.is_acquired(&key) {
                    if slot_mode == AccessMode::ReadWrite {
                        view.acquire(key, AccessMode::ReadWrite, None, Vec::new());
                    }
                } else {
                    let (value, deps) = cell.act_copy(&key);
                    view.acquire(key, slot_mode, value, deps);
                }
                Ok(())
            }
            ExecPath::NonTxn => {
                let view = self.views.get_mut(&actor).expect("entered");
                if !view.is_acquired(&key) {
                    let (value, deps) = cell.non_txn_copy(&key);
                    view.acquire(key, AccessMode::ReadWrite, value, deps);
                }
                Ok(())
            }
        }
    }

    /// Acquires one lock with wait-die semantics: waits while queued, dies
    /// (retryable abort) when outranked.
    async fn act_lock(
        &mut self,
        cell: &Arc<ActorCell>,
        target: LockTarget,
        mode: AccessMode,
    ) -> Result<(), TxnError> {
        let tid = self.ctx.tid;
        match cell.act_acquire(tid, target.clone(), mode) {
            Acquire::Granted => {}
            Acquire::Die => return Err(TxnError::Aborted { tid, cause: AbortCause::Die }),
            Acquire::MustWait => {
                wait_cell(cell, || match cell.act_poll(tid, &target) {
                    LockPoll::Holds => Ok(Some(())),
                    LockPoll::Waiting => Ok(None),
                    LockPoll::Dead => Err(TxnError::Aborted { tid, cause: AbortCause::Die }),
                })
                .await?;
            }
        }
        self.timeline.mark(Breakpoint::StateReady);
        Ok(())
    }

    /// Resolves the current actor's not-yet-forwarded ops into pending
    /// forward activations (and, on the unprotected path, applies them to
    /// master state).
    fn flush_view(&mut self) -> Result<(), TxnError> {
        let actor = self.current_actor().clone();
        let Some(view) = self.views.get_mut(&actor) else { return Ok(()) };
        let (start, ops) = view.take_unforwarded();
        if ops.is_empty() {
            return Ok(());
        }
        if self.path == ExecPath::NonTxn {
            self.inner.cell(&actor)?.non_txn_apply(&ops);
        }
        let view = self.views.get(&actor).expect("present");
        let forwards = resolve_forwards(&actor, |k| view.records_at(k, start), &ops);
        for entry in forwards {
            self.pending_forwards.push_back(entry);
        }
        Ok(())
    }

    /// Runs forward activations to a fixed point: each activation's exit
    /// flushes its own new ops back into the queue.
    async fn drive_forwards(&mut self) -> Result<(), TxnError> {
        self.flush_view()?;
        let mut activations: u32 = 0;
        while let Some((target, ops)) = self.pending_forwards.pop_front() {
            activations += 1;
            if activations > MAX_FORWARD_ACTIVATIONS {
                return Err(TxnError::ForwardDepthExceeded(MAX_FORWARD_ACTIVATIONS));
            }
            self.activate(target, Activation::Forward(ops), false).await?;
        }
        Ok(())
    }

    /// Path-specific activation exit; on the scheduled path this may pass
    /// the turn on and report per-actor readiness to the coordinator.
    fn exit(&mut self, actor: &ActorId, cell: &Arc<ActorCell>) {
        if self.path != ExecPath::Pact {
            return;
        }
        let views = &self.views;
        let ready = cell.pact_exit(self.ctx.bid, self.ctx.tid, || {
            views.get(actor).map(|v| v.ops().to_vec()).unwrap_or_default()
        });
        if ready {
            let _ = self.inner.coord_tx.send(CoordMsg::ActorReady {
                bid: self.ctx.bid,
                actor: actor.clone(),
            });
        }
    }
}

fn abort_cause(e: &TxnError) -> AbortCause {
    match e {
        TxnError::Aborted { cause, .. } => cause.clone(),
        _ => AbortCause::UserLogic,
    }
}

// ---------------------------------------------------------------------
// Scheduled-transaction task
// ---------------------------------------------------------------------

pub(crate) async fn run_pact(
    inner: Arc<ClusterInner>,
    tid: u64,
    bid: u64,
    signal: Arc<BatchSignal>,
    job: PactJob,
) {
    let PactJob { root, method, args, spec, mut timeline, result_tx } = job;
    timeline.mark(Breakpoint::ScheduleReceived);
    let txn_type = method.clone();
    let ctx = TxnContext::pact(tid, bid, inner.granularity);
    let mut mc = MethodCtx::new(inner.clone(), ExecPath::Pact, ctx, spec, timeline);
    let mut outcome = mc.activate(root, Activation::Method { method, args }, true).await;
    if outcome.is_ok() {
        // Finish on every declared actor: actors where the declared access
        // count was drained already finished through their exits; the rest
        // (over-declared counts, untouched actors) finish here.
        let actors: Vec<ActorId> = mc.spec.entries.keys().cloned().collect();
        for actor in actors {
            let ops = mc.views.get(&actor).map(|v| v.ops().to_vec()).unwrap_or_default();
            let flip = inner
                .cell(&actor)
                .and_then(|cell| cell.pact_logic_done(bid, tid, move || ops));
            match flip {
                Ok(true) => {
                    let _ = inner.coord_tx.send(CoordMsg::ActorReady { bid, actor });
                }
                Ok(false) => {}
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
    }
    match outcome {
        Ok(value) => {
            let _ = inner.coord_tx.send(CoordMsg::TaskFinished { bid, tid, failed: false });
            match signal.wait().await {
                SignalOutcome::Committed { persisted } => {
                    if let Some(at) = persisted.values().max() {
                        mc.timeline.mark_at(Breakpoint::LogPersisted, *at);
                    }
                    mc.timeline.mark(Breakpoint::Replied);
                    inner.metrics.record_commit(
                        TxnKind::Pact,
                        &txn_type,
                        mc.timeline.end_to_end(),
                        Some(mc.timeline.intervals()),
                    );
                    let _ = result_tx.send(Ok(value));
                }
                SignalOutcome::Failed => {
                    inner.metrics.record_abort(TxnKind::Pact, &txn_type, AbortCause::BatchFailed);
                    let _ = result_tx
                        .send(Err(TxnError::Aborted { tid, cause: AbortCause::BatchFailed }));
                }
            }
        }
        Err(e) => {
            // Any member failure is fatal for the whole batch. The
            // coordinator flags the batch on every cell, unblocking
            // members waiting for turns, and discards it once all member
            // tasks have ended.
            let _ = inner.coord_tx.send(CoordMsg::TaskFinished { bid, tid, failed: true });
            inner.metrics.record_abort(TxnKind::Pact, &txn_type, abort_cause(&e));
            let _ = result_tx.send(Err(e));
        }
    }
}

// ---------------------------------------------------------------------
// Lock-based transaction task
// ---------------------------------------------------------------------

fn backoff_after(attempt: u32, tid: u64) -> Duration {
    let exp = attempt.min(6);
    let base = Duration::from_micros(100u64 << exp).min(Duration::from_millis(5));
    // Deterministic jitter from the id keeps retry herds apart without
    // pulling in a randomness dependency.
    let jitter_ns = (tid.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 50) as u32;
    base + Duration::from_nanos(jitter_ns as u64)
}

pub(crate) async fn run_act(
    inner: Arc<ClusterInner>,
    first_tid: u64,
    root: ActorId,
    method: String,
    args: Value,
    mut timeline: Timeline,
    result_tx: oneshot::Sender<Result<Value, TxnError>>,
) {
    let txn_type = method.clone();
    let mut tid = first_tid;
    let mut attempt: u32 = 0;
    loop {
        attempt += 1;
        let ctx = TxnContext::act(tid, inner.granularity);
        let mut mc =
            MethodCtx::new(inner.clone(), ExecPath::Act, ctx, AccessSpec::new(), timeline);
        let outcome = mc
            .activate(
                root.clone(),
                Activation::Method { method: method.clone(), args: args.clone() },
                true,
            )
            .await;
        let MethodCtx { views, timeline: tl, .. } = mc;
        timeline = tl;
        match outcome {
            Ok(value) => {
                // Two-phase commit over every touched actor. Participants
                // keep holding their locks, so in-process they always vote
                // yes; the decision persists one record per participant.
                let mut tp = TwoPhaseState::new(tid);
                for p in views.keys() {
                    tp.add_participant(p.clone());
                }
                tp.begin_prepare();
                if let Some(latency) = inner.call_latency {
                    tokio::time::sleep(latency).await;
                }
                let ordered: Vec<ActorId> = tp.participants().cloned().collect();
                let mut phase = None;
                for p in &ordered {
                    phase = tp.record_vote(p, true);
                }
                debug_assert!(matches!(phase, Some(Phase::Committed)));
                if let Some(latency) = inner.call_latency {
                    tokio::time::sleep(latency).await;
                }
                let mut commit_err: Option<TxnError> = None;
                let mut committed = 0usize;
                for p in &ordered {
                    let ops = views.get(p).map(|v| v.ops().to_vec()).unwrap_or_default();
                    match inner.cells[p].act_commit(tid, &ops) {
                        Ok(()) => committed += 1,
                        Err(e) => {
                            commit_err = Some(e);
                            break;
                        }
                    }
                }
                if let Some(e) = commit_err {
                    // Storage fault at the commit point: participants that
                    // already applied keep their records; release the rest.
                    for p in ordered.iter().skip(committed) {
                        inner.cells[p].act_abort(tid);
                    }
                    inner.metrics.record_abort(TxnKind::Act, &txn_type, AbortCause::UserLogic);
                    let _ = result_tx.send(Err(e));
                    return;
                }
                inner.trace.lock().record_event(format!("a{tid}"));
                timeline.mark(Breakpoint::LogPersisted);
                timeline.mark(Breakpoint::Replied);
                inner.metrics.record_commit(
                    TxnKind::Act,
                    &txn_type,
                    timeline.end_to_end(),
                    Some(timeline.intervals()),
                );
                let _ = result_tx.send(Ok(value));
                return;
            }
            Err(e) => {
                for actor in views.keys() {
                    if let Some(cell) = inner.cells.get(actor) {
                        cell.act_abort(tid);
                    }
                }
                inner.metrics.record_abort(TxnKind::Act, &txn_type, abort_cause(&e));
                if e.is_retryable_abort() && attempt < inner.act_retry_limit {
                    tokio::time::sleep(backoff_after(attempt, tid)).await;
                    match inner.allocate_id().await {
                        Ok(fresh) => tid = fresh,
                        Err(_) => {
                            let _ = result_tx.send(Err(TxnError::Shutdown));
                            return;
                        }
                    }
                    continue;
                }
                let _ = result_tx.send(Err(e));
                return;
            }
        }
    }
}

// ---------------------------------------------------------------------
// Unprotected task
// ---------------------------------------------------------------------

pub(crate) async fn run_non_txn(
    inner: Arc<ClusterInner>,
    tid: u64,
    root: ActorId,
    method: String,
    args: Value,
    timeline: Timeline,
    result_tx: oneshot::Sender<Result<Value, TxnError>>,
) {
    let txn_type = method.clone();
    let ctx = TxnContext::act(tid, inner.granularity);
    let mut mc = MethodCtx::new(inner.clone(), ExecPath::NonTxn, ctx, AccessSpec::new(), timeline);
    let outcome = mc.activate(root, Activation::Method { method, args }, true).await;
    let mut timeline = mc.timeline;
    match outcome {
        Ok(value) => {
            timeline.mark(Breakpoint::Replied);
            inner.metrics.record_commit(
                TxnKind::NonTxn,
                &txn_type,
                timeline.end_to_end(),
                Some(timeline.intervals()),
            );
            let _ = result_tx.send(Ok(value));
        }
        Err(e) => {
            inner.metrics.record_abort(TxnKind::NonTxn, &txn_type, abort_cause(&e));
            let _ = result_tx.send(Err(e));
        }
    }
}
