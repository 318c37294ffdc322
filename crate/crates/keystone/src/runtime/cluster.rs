//! The cluster: actor cells, the scheduling coordinator, and the client
//! API for submitting transactions.
//!
//! One coordinator task owns the global id counter (transaction and batch
//! ids come from the same sequence), collects scheduled-transaction
//! submissions, forms batches on size or delay triggers, and delivers the
//! schedule to every participating cell before any member task starts.
//! Batch commit is confirmed centrally: cells report per-actor readiness,
//! member tasks report success or failure, and only when every member
//! finished cleanly does the coordinator order the per-actor persist and
//! apply. Any member failure tears the whole batch down instead.

use crate::deps::{CyclePolicy, DepProbe, DepType, FunctionRegistry, UpdateFn};
use crate::error::TxnError;
use crate::metrics::{Breakpoint, MetricsSink, Timeline};
use crate::pact::{form_batch, AccessSpec, BatchSchedule, BatchTriggers};
use crate::runtime::cell::ActorCell;
use crate::runtime::txn::{run_act, run_non_txn, run_pact, MethodFn};
use crate::state::ActorState;
use crate::types::{ActorId, Granularity, Key};
use crate::value::Value;
use crate::wal::{snapshot_of, FlushPolicy, LogMode, LogStore, Manifest};
use crate::wire::encode_snapshot;
use crate::deps::DependencyRecord;
use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio::sync::{mpsc, oneshot, Notify};
use tokio::task::JoinHandle;

// ---------------------------------------------------------------------
// Messages and shared plumbing
// ---------------------------------------------------------------------

/// Everything a spawned scheduled-transaction task needs.
pub(crate) struct PactJob {
    pub root: ActorId,
    pub method: String,
    pub args: Value,
    pub spec: AccessSpec,
    pub timeline: Timeline,
    pub result_tx: oneshot::Sender<Result<Value, TxnError>>,
}

pub(crate) enum CoordMsg {
    SubmitPact { job: PactJob, tid_reply: oneshot::Sender<u64> },
    AllocateId { reply: oneshot::Sender<u64> },
    /// Chains future batches after a seeding snapshot.
    SeedChain { actors: Vec<ActorId>, bid: u64, done: oneshot::Sender<()> },
    /// A cell finished every scheduled transaction of a batch.
    ActorReady { bid: u64, actor: ActorId },
    /// A member task ended (successfully or not).
    TaskFinished { bid: u64, tid: u64, failed: bool },
    /// Form a batch from whatever is pending right now.
    Flush,
    Shutdown { done: oneshot::Sender<()> },
}

/// Terminal outcome of a batch, broadcast to its member tasks.
pub(crate) enum SignalOutcome {
    Committed { persisted: BTreeMap<ActorId, Instant> },
    Failed,
}

enum SignalState {
    Pending,
    Committed { persisted: BTreeMap<ActorId, Instant> },
    Failed,
}

/// One-shot broadcast: member tasks wait on it after reporting their own
/// completion; the coordinator resolves it exactly once.
pub(crate) struct BatchSignal {
    state: Mutex<SignalState>,
    notify: Notify,
}

impl BatchSignal {
    fn new() -> Arc<Self> {
        Arc::new(BatchSignal { state: Mutex::new(SignalState::Pending), notify: Notify::new() })
    }

    fn resolve_committed(&self, persisted: BTreeMap<ActorId, Instant>) {
        *self.state.lock() = SignalState::Committed { persisted };
        self.notify.notify_waiters();
    }

    fn resolve_failed(&self) {
        *self.state.lock() = SignalState::Failed;
        self.notify.notify_waiters();
    }

    pub(crate) async fn wait(&self) -> SignalOutcome {
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            match &*self.state.lock() {
                SignalState::Pending => {}
                SignalState::Committed { persisted } => {
                    return SignalOutcome::Committed { persisted: persisted.clone() }
                }
                SignalState::Failed => return SignalOutcome::Failed,
            }
            notified.await;
        }
    }
}

/// Deterministic digest of everything the scheduler decided, plus commit
/// events, for replaying-equals-live checks.
pub(crate) struct TraceState {
    chain: [u8; 32],
    schedules: u64,
    events: Vec<String>,
}

impl TraceState {
    fn new() -> Self {
        TraceState { chain: [0; 32], schedules: 0, events: Vec::new() }
    }

    fn record_schedule(&mut self, schedule: &BatchSchedule) {
        let mut h = Sha256::new();
        h.update(self.chain);
        h.update(schedule.canonical_bytes());
        self.chain = h.finalize().into();
        self.schedules += 1;
    }

    pub(crate) fn record_event(&mut self, event: String) {
        self.events.push(event);
    }
}

/// Snapshot of the scheduling trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceSummary {
    /// Running hash over every batch schedule formed, in order.
    pub schedule_chain: String,
    /// Number of batches formed.
    pub batches: u64,
    /// Commit/teardown events: `b<bid>:[tids]` for committed batches,
    /// `f<bid>` for failed ones, `a<tid>` for lock-based commits.
    pub events: Vec<String>,
}

/// Counts live transaction tasks so shutdown can quiesce.
#[derive(Default)]
pub(crate) struct TaskGauge {
    active: AtomicU64,
    notify: Notify,
}

pub(crate) struct TaskGuard {
    inner: Arc<ClusterInner>,
}

impl TaskGuard {
    pub(crate) fn register(inner: &Arc<ClusterInner>) -> Self {
        inner.tasks.active.fetch_add(1, Ordering::SeqCst);
        TaskGuard { inner: inner.clone() }
    }
}

impl Drop for TaskGuard {
    fn drop(&mut self) {
        if self.inner.tasks.active.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.inner.tasks.notify.notify_waiters();
        }
    }
}

// ---------------------------------------------------------------------
// Cluster internals
// ---------------------------------------------------------------------

pub(crate) struct ClusterInner {
    pub(crate) cells: HashMap<ActorId, Arc<ActorCell>>,
    pub(crate) methods: HashMap<(String, String), MethodFn>,
    pub(crate) granularity: Granularity,
    pub(crate) cycle_policy: CyclePolicy,
    /// Simulated per-activation network latency, if any.
    pub(crate) call_latency: Option<Duration>,
    pub(crate) act_retry_limit: u32,
    pub(crate) registry: FunctionRegistry,
    pub(crate) log: Arc<LogStore>,
    pub(crate) coord_tx: mpsc::UnboundedSender<CoordMsg>,
    pub(crate) metrics: MetricsSink,
    pub(crate) trace: Mutex<TraceState>,
    pub(crate) tasks: TaskGauge,
}

impl ClusterInner {
    pub(crate) fn cell(&self, actor: &ActorId) -> Result<Arc<ActorCell>, TxnError> {
        self.cells
            .get(actor)
            .cloned()
            .ok_or_else(|| TxnError::InvalidSpec(format!("unknown actor {actor}")))
    }

    pub(crate) async fn allocate_id(&self) -> Result<u64, TxnError> {
        let (tx, rx) = oneshot::channel();
        self.coord_tx.send(CoordMsg::AllocateId { reply: tx }).map_err(|_| TxnError::Shutdown)?;
        rx.await.map_err(|_| TxnError::Shutdown)
    }
}

/// Registration-time cycle probes walk committed master state. In-flight,
/// uncommitted registrations on other actors are not visible to the walk;
/// with the probing policy two concurrent registrations can in principle
/// close a cycle the probe misses. The default dual-role policy has no
/// such window (each side checks its own role locally).
impl DepProbe for ClusterInner {
    fn outgoing_updates(&self, actor: &ActorId, key: &Key) -> Vec<(ActorId, Key)> {
        match self.cells.get(actor) {
            Some(cell) => cell
                .act_copy(key)
                .1
                .into_iter()
                .filter(|r| r.dep_type == DepType::Update && r.leads_from(actor, key))
                .map(|r| (r.follower_actor, r.follower_key))
                .collect(),
            None => Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------
// Coordinator
// ---------------------------------------------------------------------

struct LiveBatch {
    schedule: Arc<BatchSchedule>,
    signal: Arc<BatchSignal>,
    jobs_total: usize,
    ready: HashSet<ActorId>,
    finished: HashSet<u64>,
    any_failed: bool,
}

struct Coordinator {
    inner: Arc<ClusterInner>,
    rx: mpsc::UnboundedReceiver<CoordMsg>,
    triggers: BatchTriggers,
    next: u64,
    pending: Vec<(u64, PactJob)>,
    first_pending_at: Option<Instant>,
    last_batch_per_actor: HashMap<ActorId, u64>,
    live: HashMap<u64, LiveBatch>,
    draining: Option<oneshot::Sender<()>>,
}

impl Coordinator {
    fn next_id(&mut self) -> u64 {
        self.next += 1;
        self.next
    }

    async fn run(mut self) {
        loop {
            let deadline = self.first_pending_at.map(|t| t + self.triggers.max_delay);
            let sleep_to = tokio::time::Instant::from_std(
                deadline.unwrap_or_else(|| Instant::now() + Duration::from_secs(3600)),
            );
            tokio::select! {
                msg = self.rx.recv() => match msg {
                    Some(msg) => self.handle(msg),
                    None => break,
                },
                _ = tokio::time::sleep_until(sleep_to), if deadline.is_some() => {
                    self.form_and_launch();
                }
            }
            if self.pending.len() >= self.triggers.max_size {
                self.form_and_launch();
            }
            if self.draining.is_some() && self.pending.is_empty() && self.live.is_empty() {
                let _ = self.draining.take().expect("checked").send(());
                break;
            }
        }
    }

    fn handle(&mut self, msg: CoordMsg) {
        match msg {
            CoordMsg::SubmitPact { mut job, tid_reply } => {
                let tid = self.next_id();
                job.timeline.mark(Breakpoint::TidAssigned);
                if let Err(e) = self.validate(&job) {
                    let _ = job.result_tx.send(Err(e));
                } else {
                    if self.pending.is_empty() {
                        self.first_pending_at = Some(Instant::now());
                    }
                    self.pending.push((tid, job));
                }
                let _ = tid_reply.send(tid);
            }
            CoordMsg::AllocateId { reply } => {
                let _ = reply.send(self.next_id());
            }
            CoordMsg::SeedChain { actors, bid, done } => {
                for actor in actors {
                    let prev = self.last_batch_per_actor.entry(actor).or_insert(0);
                    *prev = (*prev).max(bid);
                }
                self.next = self.next.max(bid);
                let _ = done.send(());
            }
            CoordMsg::ActorReady { bid, actor } => {
                if let Some(lb) = self.live.get_mut(&bid) {
                    lb.ready.insert(actor);
                    self.try_finalize(bid);
                }
            }
            CoordMsg::TaskFinished { bid, tid, failed } => {
                let Some(lb) = self.live.get_mut(&bid) else { return };
                lb.finished.insert(tid);
                if failed && !lb.any_failed {
                    lb.any_failed = true;
                    // Wake every blocked member: the batch cannot commit.
                    let schedule = lb.schedule.clone();
                    for actor in schedule.actors.keys() {
                        if let Some(cell) = self.inner.cells.get(actor) {
                            cell.fail_batch(bid);
                        }
                    }
                }
                self.try_finalize(bid);
            }
            CoordMsg::Flush => self.form_and_launch(),
            CoordMsg::Shutdown { done } => {
                self.draining = Some(done);
                self.form_and_launch();
            }
        }
    }

    fn validate(&self, job: &PactJob) -> Result<(), TxnError> {
        job.spec.validate(self.inner.granularity)?;
        if job.spec.get(&job.root).is_none() {
            return Err(TxnError::InvalidSpec(format!(
                "root actor {} missing from access spec",
                job.root
            )));
        }
        for actor in job.spec.entries.keys() {
            if !self.inner.cells.contains_key(actor) {
                return Err(TxnError::InvalidSpec(format!("unknown actor {actor}")));
            }
        }
        Ok(())
    }

    fn form_and_launch(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let members = std::mem::take(&mut self.pending);
        self.first_pending_at = None;
        let bid = self.next_id();
        let specs: Vec<(u64, AccessSpec)> =
            members.iter().map(|(tid, job)| (*tid, job.spec.clone())).collect();
        let schedule = Arc::new(form_batch(
            bid,
            self.inner.granularity,
            &specs,
            &mut self.last_batch_per_actor,
        ));
        self.inner.trace.lock().record_schedule(&schedule);
        self.inner.metrics.record_batch(schedule.tids.len(), schedule.actors.len());
        // Deliver before any member starts so no cell can see a member of
        // a batch it has not heard of.
        for actor in schedule.actors.keys() {
            self.inner.cells[actor].deliver_schedule(schedule.clone());
        }
        let signal = BatchSignal::new();
        self.live.insert(
            bid,
            LiveBatch {
                schedule: schedule.clone(),
                signal: signal.clone(),
                jobs_total: members.len(),
                ready: HashSet::new(),
                finished: HashSet::new(),
                any_failed: false,
            },
        );
        for (tid, job) in members {
            let guard = TaskGuard::register(&self.inner);
            let inner = self.inner.clone();
            let signal = signal.clone();
            tokio::spawn(async move {
                let _guard = guard;
                run_pact(inner, tid, bid, signal, job).await;
            });
        }
    }

    /// Commits or tears down a batch once every member task has ended.
    fn try_finalize(&mut self, bid: u64) {
        let Some(lb) = self.live.get(&bid) else { return };
        if lb.finished.len() < lb.jobs_total {
            return;
        }
        let lb = self.live.remove(&bid).expect("checked");
        if lb.any_failed {
            for actor in lb.schedule.actors.keys() {
                if let Some(cell) = self.inner.cells.get(actor) {
                    cell.discard_batch(bid);
                }
            }
            self.inner.trace.lock().record_event(format!("f{bid}"));
            lb.signal.resolve_failed();
            return;
        }
        debug_assert_eq!(lb.ready.len(), lb.schedule.actors.len(), "commit without full readiness");
        let mut actors: Vec<&ActorId> = lb.schedule.actors.keys().collect();
        actors.sort();
        let mut persisted = BTreeMap::new();
        let mut broken = false;
        for actor in actors {
            let cell = &self.inner.cells[actor];
            match cell.commit_batch(bid) {
                Ok(Some(done)) => {
                    persisted.insert(actor.clone(), done.persisted_at);
                }
                // A log-write failure mid-batch leaves earlier actors
                // applied: a storage fault breaks cross-actor atomicity
                // here just as a lost commit record would. Members are
                // told the batch failed.
                Ok(None) | Err(_) => {
                    cell.discard_batch(bid);
                    broken = true;
                }
            }
        }
        if broken {
            self.inner.trace.lock().record_event(format!("f{bid}"));
            lb.signal.resolve_failed();
        } else {
            self.inner
                .trace
                .lock()
                .record_event(format!("b{}:{:?}", bid, lb.schedule.tids));
            lb.signal.resolve_committed(persisted);
        }
    }
}

// ---------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------

/// Seed content for one actor, installed before transactions run.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub actor: ActorId,
    pub kv: Vec<(Key, Value)>,
    pub deps: Vec<(Key, DependencyRecord)>,
}

impl SeedData {
    pub fn new(actor: ActorId) -> Self {
        SeedData { actor, kv: Vec::new(), deps: Vec::new() }
    }
}

/// A submitted transaction: its first-attempt id and the pending result.
pub struct TxnHandle {
    tid: u64,
    rx: oneshot::Receiver<Result<Value, TxnError>>,
}

impl TxnHandle {
    pub fn tid(&self) -> u64 {
        self.tid
    }

    pub async fn wait(self) -> Result<Value, TxnError> {
        self.rx.await.unwrap_or(Err(TxnError::Shutdown))
    }
}

/// Declares one actor group: a name and a fixed number of partitions,
/// plus the methods its actors answer to.
pub struct GroupBuilder {
    name: String,
    partitions: u32,
    methods: Vec<(String, MethodFn)>,
}

impl GroupBuilder {
    pub fn new(name: impl Into<String>, partitions: u32) -> Self {
        GroupBuilder { name: name.into(), partitions, methods: Vec::new() }
    }

    pub fn method(mut self, name: impl Into<String>, f: MethodFn) -> Self {
        self.methods.push((name.into(), f));
        self
    }
}

pub struct ClusterBuilder {
    granularity: Granularity,
    log_mode: LogMode,
    flush: FlushPolicy,
    log_dir: Option<PathBuf>,
    triggers: BatchTriggers,
    cycle_policy: CyclePolicy,
    call_latency: Option<Duration>,
    act_retry_limit: u32,
    registry: FunctionRegistry,
    groups: Vec<GroupBuilder>,
}

impl Default for ClusterBuilder {
    fn default() -> Self {
        ClusterBuilder {
            granularity: Granularity::ActorLevel,
            log_mode: LogMode::Disabled,
            flush: FlushPolicy::Never,
            log_dir: None,
            triggers: BatchTriggers::default(),
            cycle_policy: CyclePolicy::default(),
            call_latency: None,
            act_retry_limit: 64,
            registry: FunctionRegistry::with_builtins(),
            groups: Vec::new(),
        }
    }
}

static DIR_SALT: AtomicU64 = AtomicU64::new(0);

fn default_log_dir() -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!(
        "keystone-{}-{}-{}",
        std::process::id(),
        DIR_SALT.fetch_add(1, Ordering::Relaxed),
        nanos
    ))
}

impl ClusterBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn granularity(mut self, g: Granularity) -> Self {
        self.granularity = g;
        self
    }

    pub fn log_mode(mut self, mode: LogMode) -> Self {
        self.log_mode = mode;
        self
    }

    pub fn flush_policy(mut self, policy: FlushPolicy) -> Self {
        self.flush = policy;
        self
    }

    pub fn log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    pub fn batch_triggers(mut self, triggers: BatchTriggers) -> Self {
        self.triggers = triggers;
        self
    }

    pub fn max_batch_size(mut self, size: usize) -> Self {
        self.triggers.max_size = size;
        self
    }

    pub fn max_batch_delay(mut self, delay: Duration) -> Self {
        self.triggers.max_delay = delay;
        self
    }

    pub fn cycle_policy(mut self, policy: CyclePolicy) -> Self {
        self.cycle_policy = policy;
        self
    }

    /// Adds a fixed latency before every actor activation, simulating a
    /// network hop between co-located cells.
    pub fn call_latency(mut self, latency: Duration) -> Self {
        self.call_latency = Some(latency);
        self
    }

    /// How many times a lock-based transaction is resubmitted after a
    /// retryable abort before its error is surfaced.
    pub fn act_retry_limit(mut self, limit: u32) -> Self {
        self.act_retry_limit = limit;
        self
    }

    /// Registers a custom follower-update function.
    ///
    /// # Panics
    /// On a duplicate function id.
    pub fn update_function(mut self, id: impl Into<String>, f: impl UpdateFn + 'static) -> Self {
        self.registry.register(id, f).expect("duplicate update function id");
        self
    }

    pub fn group(mut self, group: GroupBuilder) -> Self {
        self.groups.push(group);
        self
    }

    /// Builds the cluster and spawns its coordinator. Must be called from
    /// within a tokio runtime.
    pub fn build(self) -> Result<Cluster, TxnError> {
        let dir = self.log_dir.unwrap_or_else(default_log_dir);
        let log = LogStore::create(&dir, self.log_mode, self.flush)
            .map_err(|e| TxnError::LogWrite(e.to_string()))?;
        let mut cells = HashMap::new();
        let mut methods: HashMap<(String, String), MethodFn> = HashMap::new();
        for group in self.groups {
            for p in 0..group.partitions {
                let id = ActorId::new(group.name.clone(), p);
                cells.insert(id.clone(), Arc::new(ActorCell::new(id, self.granularity, log.clone())));
            }
            for (name, f) in group.methods {
                methods.insert((group.name.clone(), name), f);
            }
        }
        let (coord_tx, coord_rx) = mpsc::unbounded_channel();
        let inner = Arc::new(ClusterInner {
            cells,
            methods,
            granularity: self.granularity,
            cycle_policy: self.cycle_policy,
            call_latency: self.call_latency,
            act_retry_limit: self.act_retry_limit,
            registry: self.registry,
            log,
            coord_tx,
            metrics: MetricsSink::new(),
            trace: Mutex::new(TraceState::new()),
            tasks: TaskGauge::default(),
        });
        let coordinator = Coordinator {
            inner: inner.clone(),
            rx: coord_rx,
            triggers: self.triggers,
            next: 0,
            pending: Vec::new(),
            first_pending_at: None,
            last_batch_per_actor: HashMap::new(),
            live: HashMap::new(),
            draining: None,
        };
        let handle = tokio::spawn(coordinator.run());
        Ok(Cluster { inner, coord: Mutex::new(Some(handle)) })
    }
}

/// An in-process actor cluster running the transactional runtime.
pub struct Cluster {
    inner: Arc<ClusterInner>,
    coord: Mutex<Option<JoinHandle<()>>>,
}

impl Cluster {
    pub fn builder() -> ClusterBuilder {
        ClusterBuilder::new()
    }

    /// Installs initial state. Call before submitting transactions: each
    /// seeded actor gets a full-image log record under a fresh batch id
    /// and future batches are chained after it.
    pub async fn seed(&self, data: Vec<SeedData>) -> Result<(), TxnError> {
        let bid = self.inner.allocate_id().await?;
        let mut actors = Vec::with_capacity(data.len());
        for SeedData { actor, kv, deps } in data {
            let cell = self.inner.cell(&actor)?;
            cell.seed(kv, deps, bid);
            let content = snapshot_of(&cell.master_snapshot());
            self.inner
                .log
                .append_snapshot(&actor, 0, bid, &content)
                .map_err(|e| TxnError::LogWrite(e.to_string()))?;
            actors.push(actor);
        }
        let (tx, rx) = oneshot::channel();
        self.inner
            .coord_tx
            .send(CoordMsg::SeedChain { actors, bid, done: tx })
            .map_err(|_| TxnError::Shutdown)?;
        rx.await.map_err(|_| TxnError::Shutdown)
    }

    /// Submits a scheduled transaction with a declared access spec. The
    /// returned handle resolves when its batch commits or fails.
    pub async fn submit_pact(
        &self,
        root: ActorId,
        method: &str,
        args: Value,
        spec: AccessSpec,
    ) -> Result<TxnHandle, TxnError> {
        let (result_tx, result_rx) = oneshot::channel();
        let (tid_tx, tid_rx) = oneshot::channel();
        let job = PactJob {
            root,
            method: method.to_string(),
            args,
            spec,
            timeline: Timeline::starting_now(),
            result_tx,
        };
        self.inner
            .coord_tx
            .send(CoordMsg::SubmitPact { job, tid_reply: tid_tx })
            .map_err(|_| TxnError::Shutdown)?;
        let tid = tid_rx.await.map_err(|_| TxnError::Shutdown)?;
        Ok(TxnHandle { tid, rx: result_rx })
    }

    /// Submits a lock-based transaction. Retryable aborts (wait-die) are
    /// resubmitted internally under fresh ids; the handle carries the
    /// first attempt's id.
    pub async fn submit_act(
        &self,
        root: ActorId,
        method: &str,
        args: Value,
    ) -> Result<TxnHandle, TxnError> {
        let mut timeline = Timeline::starting_now();
        let tid = self.inner.allocate_id().await?;
        timeline.mark(Breakpoint::TidAssigned);
        let (result_tx, result_rx) = oneshot::channel();
        let guard = TaskGuard::register(&self.inner);
        let inner = self.inner.clone();
        let root = root.clone();
        let method = method.to_string();
        tokio::spawn(async move {
            let _guard = guard;
            run_act(inner, tid, root, method, args, timeline, result_tx).await;
        });
        Ok(TxnHandle { tid, rx: result_rx })
    }

    /// Runs a method with no transactional protection: direct reads,
    /// per-activation applies, no logging, no atomicity.
    pub async fn submit_non_txn(
        &self,
        root: ActorId,
        method: &str,
        args: Value,
    ) -> Result<TxnHandle, TxnError> {
        let mut timeline = Timeline::starting_now();
        let tid = self.inner.allocate_id().await?;
        timeline.mark(Breakpoint::TidAssigned);
        let (result_tx, result_rx) = oneshot::channel();
        let guard = TaskGuard::register(&self.inner);
        let inner = self.inner.clone();
        let method = method.to_string();
        tokio::spawn(async move {
            let _guard = guard;
            run_non_txn(inner, tid, root, method, args, timeline, result_tx).await;
        });
        Ok(TxnHandle { tid, rx: result_rx })
    }

    /// Forms a batch from currently pending submissions without waiting
    /// for the size or delay trigger.
    pub fn flush(&self) -> Result<(), TxnError> {
        self.inner.coord_tx.send(CoordMsg::Flush).map_err(|_| TxnError::Shutdown)
    }

    /// Drains pending work, waits for every transaction task to end, and
    /// seals the log, returning its manifest.
    pub async fn shutdown(&self) -> Result<Manifest, TxnError> {
        let (tx, rx) = oneshot::channel();
        self.inner
            .coord_tx
            .send(CoordMsg::Shutdown { done: tx })
            .map_err(|_| TxnError::Shutdown)?;
        rx.await.map_err(|_| TxnError::Shutdown)?;
        // Wait for in-flight lock-based and unprotected tasks too.
        loop {
            let notified = self.inner.tasks.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.inner.tasks.active.load(Ordering::SeqCst) == 0 {
                break;
            }
            notified.await;
        }
        let handle = self.coord.lock().take();
        if let Some(handle) = handle {
            let _ = handle.await;
        }
        self.inner.log.seal().map_err(|e| TxnError::LogWrite(e.to_string()))
    }

    pub fn metrics(&self) -> &MetricsSink {
        &self.inner.metrics
    }

    pub fn granularity(&self) -> Granularity {
        self.inner.granularity
    }

    pub fn log_store(&self) -> Arc<LogStore> {
        self.inner.log.clone()
    }

    pub fn log_dir(&self) -> &Path {
        self.inner.log.dir()
    }

    /// All actor ids, sorted.
    pub fn actors(&self) -> Vec<ActorId> {
        let mut out: Vec<ActorId> = self.inner.cells.keys().cloned().collect();
        out.sort();
        out
    }

    pub fn master_snapshot(&self, actor: &ActorId) -> Option<ActorState> {
        self.inner.cells.get(actor).map(|c| c.master_snapshot())
    }

    /// Copies every actor's master state.
    pub fn dump_states(&self) -> BTreeMap<ActorId, ActorState> {
        self.inner
            .cells
            .iter()
            .map(|(a, c)| (a.clone(), c.master_snapshot()))
            .collect()
    }

    /// Digest of all master state, order-independent of execution: actors
    /// are hashed in sorted order using the snapshot wire encoding.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for (actor, state) in self.dump_states() {
            h.update(actor.to_string().as_bytes());
            h.update(encode_snapshot(0, 0, &snapshot_of(&state)));
        }
        hex(&h.finalize())
    }

    pub fn trace_summary(&self) -> TraceSummary {
        let trace = self.inner.trace.lock();
        TraceSummary {
            schedule_chain: hex(&trace.chain),
            batches: trace.schedules,
            events: trace.events.clone(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
