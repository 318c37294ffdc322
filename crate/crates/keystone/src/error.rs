//! Error taxonomy. State and dependency errors are local to one actor's
//! view; transaction errors are what submitters and method bodies see;
//! log errors surface from the write-ahead store and replay.

use crate::types::{ActorId, Key};
use thiserror::Error;

/// Errors raised by operations on a transaction's dictionary view or by
/// applying committed logs to master state.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    /// The key was never acquired into this transaction's view.
    #[error("key {0} not acquired in this transaction")]
    KeyNotAcquired(Key),
    /// The key was acquired read-only and a write was attempted.
    #[error("key {0} acquired read-only")]
    ReadOnlyAccess(Key),
    /// Delete of a key that is absent in the transaction's view.
    #[error("key {0} absent")]
    KeyAbsent(Key),
    /// A commit marker at or below the actor's high-water mark was applied.
    #[error("stale apply: marker {marker} already covered (last applied {last})")]
    StaleApply { marker: u64, last: u64 },
}

/// Errors from dependency registration and the update-function registry.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DepError {
    #[error("update function {0:?} already registered")]
    DuplicateFunctionId(String),
    #[error("update function {0:?} not registered")]
    UnknownFunction(String),
    /// The candidate follower key failed the cycle-prevention policy.
    #[error("key {0} cannot become a follower under the active cycle policy")]
    FollowerIneligible(Key),
    /// The leader key does not exist on the leader actor.
    #[error("leader key {0} does not exist")]
    LeaderKeyMissing(Key),
    /// The candidate leader key failed the cycle-prevention policy.
    #[error("key {0} cannot become a leader under the active cycle policy")]
    LeaderIneligible(Key),
    /// Same (type, leader, follower) edge already registered.
    #[error("dependency already registered between {leader} and {follower}")]
    DuplicateDependency { leader: Key, follower: Key },
    /// Registration-time cycle probe exceeded its hop budget.
    #[error("cycle probe exceeded hop limit {0}")]
    HopLimitExceeded(u32),
    /// An update function was applied to values it cannot combine.
    #[error("update function {function}: {reason}")]
    TypeMismatch { function: String, reason: String },
}

/// Cause recorded when a transaction aborts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortCause {
    /// Wait-die: this transaction was younger than a conflicting holder.
    Die,
    /// A participant voted no or timed out during two-phase commit.
    VoteNo,
    /// The whole PACT batch failed (another member misbehaved).
    BatchFailed,
    /// User method returned an error.
    UserLogic,
}

/// Errors surfaced to transaction submitters and inside method bodies.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxnError {
    /// A PACT touched an actor or key beyond its declared access spec, or
    /// exceeded a declared access count. Fatal for the whole batch.
    #[error("undeclared access by txn {tid} on {actor}: {detail}")]
    UndeclaredAccess {
        tid: u64,
        actor: ActorId,
        detail: String,
    },
    #[error("transaction {tid} aborted: {cause:?}")]
    Aborted { tid: u64, cause: AbortCause },
    #[error("state error: {0}")]
    State(#[from] StateError),
    #[error("dependency error: {0}")]
    Dep(#[from] DepError),
    #[error("no such method {method:?} on group {group:?}")]
    UnknownMethod { group: String, method: String },
    #[error("invalid access spec: {0}")]
    InvalidSpec(String),
    #[error("log write failed: {0}")]
    LogWrite(String),
    #[error("forwarding depth cap {0} exceeded; likely a dependency cycle")]
    ForwardDepthExceeded(u32),
    #[error("{0}")]
    User(String),
    #[error("cluster shutting down")]
    Shutdown,
}

impl TxnError {
    pub fn user(msg: impl Into<String>) -> Self {
        TxnError::User(msg.into())
    }

    /// True for the abort flavors that make an ACT worth resubmitting with
    /// a fresh, younger tid.
    pub fn is_retryable_abort(&self) -> bool {
        matches!(
            self,
            TxnError::Aborted {
                cause: AbortCause::Die | AbortCause::VoteNo,
                ..
            }
        )
    }
}

/// Errors from the append-only log store.
#[derive(Debug, Error)]
pub enum WalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Record failed its length or checksum validation (torn write).
    #[error("corrupt record at byte {offset} of {file}: {reason}")]
    CorruptRecord {
        file: String,
        offset: u64,
        reason: String,
    },
    /// Batch ids regressed within one actor's stream.
    #[error("order violation in {file}: bid {bid} after {prev}")]
    OrderViolation { file: String, bid: u64, prev: u64 },
    #[error("manifest: {0}")]
    Manifest(String),
}
