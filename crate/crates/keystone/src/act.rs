//! Locking for on-demand (non-pre-declared) transactions.
//!
//! Each actor owns one [`LockTable`] covering either the whole actor or
//! individual keys, depending on the run's granularity. Conflicts resolve
//! by wait-die: an older transaction (smaller tid) may wait for younger
//! holders, a younger one aborts immediately. Because every wait edge
//! points from an older transaction to a younger one, no cycle can form
//! and deadlock is impossible; aborted transactions retry under a fresh,
//! younger tid.
//!
//! Locks are strict two-phase: a transaction releases everything at once
//! when its two-phase commit reaches a verdict. [`TwoPhaseState`] tracks
//! that verdict per transaction; the message flow around it lives in the
//! runtime.
//!
//! The table is plain single-threaded data — it is always owned by one
//! actor and accessed under that actor's state lock. Blocked acquirers are
//! suspended tasks that re-poll [`LockTable::holds`] when woken, so the
//! table never parks a thread.

use crate::types::{AccessMode, ActorId, Key};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

/// What an ACT locks: the whole actor (actor-level granularity) or one
/// key (key-level).
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum LockTarget {
    Actor,
    Key(Key),
}

impl fmt::Display for LockTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LockTarget::Actor => write!(f, "<actor>"),
            LockTarget::Key(k) => write!(f, "{k}"),
        }
    }
}

/// Outcome of a lock request. `Die` is a normal outcome, not an error:
/// the caller aborts the whole transaction and the client retries it with
/// a fresh tid.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Acquire {
    Granted,
    MustWait,
    Die,
}

fn compatible(held: AccessMode, requested: AccessMode) -> bool {
    held == AccessMode::Read && requested == AccessMode::Read
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Waiter {
    tid: u64,
    mode: AccessMode,
}

#[derive(Default, Debug)]
struct LockEntry {
    holders: HashMap<u64, AccessMode>,
    waiters: VecDeque<Waiter>,
    /// Key was deleted by a committed transaction; the entry is garbage
    /// collected once nothing holds or awaits it.
    deleted: bool,
}

impl LockEntry {
    fn conflicting_holders<'a>(
        &'a self,
        tid: u64,
        mode: AccessMode,
    ) -> impl Iterator<Item = u64> + 'a {
        self.holders
            .iter()
            .filter(move |(h, held)| **h != tid && !compatible(**held, mode))
            .map(|(h, _)| *h)
    }

    fn is_empty(&self) -> bool {
        self.holders.is_empty() && self.waiters.is_empty()
    }

    /// Grants every waiter, scanning in queue order, that is compatible
    /// with the holders as they stand after the grants before it.
    fn pump(&mut self, granted: &mut Vec<u64>) {
        let mut i = 0;
        while i < self.waiters.len() {
            let w = self.waiters[i];
            let blocked = self.conflicting_holders(w.tid, w.mode).next().is_some();
            if blocked {
                i += 1;
                continue;
            }
            self.holders.insert(w.tid, w.mode);
            self.waiters.remove(i);
            granted.push(w.tid);
        }
    }

    /// Re-runs the wait-die test for every queued waiter against the
    /// current holders. A waiter that is now younger than some conflicting
    /// holder would have died had it arrived now — it dies in place, which
    /// keeps every wait edge pointing old → young at all times (the
    /// age-at-enqueue justification can be invalidated by any grant).
    fn revalidate(&mut self, evicted: &mut Vec<u64>) {
        let mut i = 0;
        while i < self.waiters.len() {
            let w = self.waiters[i];
            let outranked = self.conflicting_holders(w.tid, w.mode).any(|h| w.tid > h);
            if outranked {
                self.waiters.remove(i);
                evicted.push(w.tid);
            } else {
                i += 1;
            }
        }
    }
}

/// Wait-die reader/writer locks for one actor's state.
#[derive(Default, Debug)]
pub struct LockTable {
    entries: HashMap<LockTarget, LockEntry>,
    /// Waiters killed by revalidation since the last [`Self::take_evicted`]
    /// — their transactions must abort exactly as if they had died at
    /// acquire time.
    evicted: Vec<u64>,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Requests `target` in `mode` for transaction `tid`.
    ///
    /// * `Granted` — compatible with every current holder (new keys create
    ///   their lock entry on the spot; re-requests and lone-holder
    ///   upgrades are granted in place).
    /// * `MustWait` — conflicts, but `tid` is older than every conflicting
    ///   holder; the request is queued and will be granted by a release.
    /// * `Die` — conflicts with some older holder. Nothing is queued.
    pub fn acquire(&mut self, tid: u64, target: LockTarget, mode: AccessMode) -> Acquire {
        let entry = self.entries.entry(target).or_default();

        if let Some(held) = entry.holders.get(&tid).copied() {
            if held == AccessMode::ReadWrite || mode == AccessMode::Read {
                return Acquire::Granted;
            }
            // Read-to-write upgrade: treated as a fresh conflict check
            // against the other holders.
        }

        let mut any_conflict = false;
        for holder in entry.conflicting_holders(tid, mode) {
            any_conflict = true;
            if tid > holder {
                return Acquire::Die;
            }
        }
        if !any_conflict {
            entry.holders.insert(tid, mode);
            entry.revalidate(&mut self.evicted);
            return Acquire::Granted;
        }
        if let Some(w) = entry.waiters.iter_mut().find(|w| w.tid == tid) {
            if mode == AccessMode::ReadWrite {
                w.mode = AccessMode::ReadWrite;
            }
        } else {
            entry.waiters.push_back(Waiter { tid, mode });
        }
        Acquire::MustWait
    }

    /// Whether `tid` currently holds `target` (in any mode). Woken waiters
    /// poll this to learn their wait resolved.
    pub fn holds(&self, tid: u64, target: &LockTarget) -> bool {
        self.entries
            .get(target)
            .map(|e| e.holders.contains_key(&tid))
            .unwrap_or(false)
    }

    /// Releases everything `tid` holds or awaits, granting eligible
    /// waiters in queue order. Returns the tids now granted something —
    /// the caller wakes those transactions (and should also drain
    /// [`Self::take_evicted`], since new grants can invalidate remaining
    /// waits). Lock entries for deleted keys vanish once drained.
    pub fn release_all(&mut self, tid: u64) -> Vec<u64> {
        let mut granted = Vec::new();
        let evicted = &mut self.evicted;
        self.entries.retain(|_, entry| {
            let held = entry.holders.remove(&tid).is_some();
            let pos = entry.waiters.iter().position(|w| w.tid == tid);
            if let Some(i) = pos {
                entry.waiters.remove(i);
            }
            if held || pos.is_some() {
                entry.pump(&mut granted);
                entry.revalidate(evicted);
            }
            !(entry.deleted && entry.is_empty())
        });
        granted.sort_unstable();
        granted.dedup();
        granted
    }

    /// Drains the transactions whose waits were killed by revalidation.
    /// Call after every `acquire`/`release_all`; each drained tid must be
    /// aborted by its owner exactly like an acquire-time death.
    pub fn take_evicted(&mut self) -> Vec<u64> {
        let mut out = std::mem::take(&mut self.evicted);
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Whether `tid` is queued waiting for `target`.
    pub fn is_waiting(&self, tid: u64, target: &LockTarget) -> bool {
        self.entries
            .get(target)
            .map(|e| e.waiters.iter().any(|w| w.tid == tid))
            .unwrap_or(false)
    }

    /// Notes that `key` was deleted by a committed transaction. Its entry
    /// is removed as soon as (or if already) unheld and unawaited.
    pub fn mark_deleted(&mut self, key: &Key) {
        let target = LockTarget::Key(key.clone());
        if let Some(entry) = self.entries.get_mut(&target) {
            entry.deleted = true;
            if entry.is_empty() {
                self.entries.remove(&target);
            }
        }
    }

    /// Notes that `key` exists again (re-inserted), cancelling a pending
    /// deletion mark.
    pub fn clear_deleted(&mut self, key: &Key) {
        if let Some(entry) = self.entries.get_mut(&LockTarget::Key(key.clone())) {
            entry.deleted = false;
        }
    }

    pub fn contains(&self, target: &LockTarget) -> bool {
        self.entries.contains_key(target)
    }

    /// Sanity probe for tests: every waiter is blocked by at least one
    /// holder and is older than all of its conflicting holders. With that
    /// true at all times, the waits-for graph cannot contain a cycle.
    pub fn wait_edges_are_old_to_young(&self) -> bool {
        self.entries.values().all(|entry| {
            entry.waiters.iter().all(|w| {
                let mut conflicts = entry.conflicting_holders(w.tid, w.mode).peekable();
                conflicts.peek().is_some()
                    && entry.conflicting_holders(w.tid, w.mode).all(|h| w.tid < h)
            })
        })
    }
}

/// Verdict phases of one on-demand transaction.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Executing,
    Prepared,
    Committed,
    Aborted,
}

/// Commit bookkeeping for one ACT, coordinated by its root actor. The
/// message flow lives in the runtime; this enforces the state machine.
#[derive(Debug)]
pub struct TwoPhaseState {
    pub tid: u64,
    participants: BTreeSet<ActorId>,
    votes: HashMap<ActorId, bool>,
    phase: Phase,
}

impl TwoPhaseState {
    pub fn new(tid: u64) -> Self {
        TwoPhaseState {
            tid,
            participants: BTreeSet::new(),
            votes: HashMap::new(),
            phase: Phase::Executing,
        }
    }

    /// Adds an actor the transaction touched; idempotent. Only legal while
    /// still executing.
    pub fn add_participant(&mut self, actor: ActorId) {
        debug_assert_eq!(self.phase, Phase::Executing);
        self.participants.insert(actor);
    }

    /// Participants in deterministic (group, partition) order.
    pub fn participants(&self) -> impl Iterator<Item = &ActorId> {
        self.participants.iter()
    }

    pub fn participant_count(&self) -> usize {
        self.participants.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn begin_prepare(&mut self) {
        debug_assert_eq!(self.phase, Phase::Executing);
        self.phase = Phase::Prepared;
    }

    /// Records one participant's vote. Returns the final verdict once all
    /// votes are in (or immediately on the first `no`).
    pub fn record_vote(&mut self, actor: &ActorId, yes: bool) -> Option<Phase> {
        if self.phase != Phase::Prepared {
            return None;
        }
        if !self.participants.contains(actor) {
            return None;
        }
        self.votes.insert(actor.clone(), yes);
        if !yes {
            self.phase = Phase::Aborted;
            return Some(Phase::Aborted);
        }
        if self.votes.len() == self.participants.len() && self.votes.values().all(|v| *v) {
            self.phase = Phase::Committed;
            return Some(Phase::Committed);
        }
        None
    }

    /// Aborts outright (lock death or user error during execution).
    pub fn abort(&mut self) {
        debug_assert_ne!(self.phase, Phase::Committed);
        self.phase = Phase::Aborted;
    }
}
