//! Transactional state management for virtual actors.
//!
//! Actor state is a collection of key-value pairs rather than an opaque
//! object. Every transaction — deterministically scheduled (PACT) or
//! lock-based (ACT) — operates on its own [`state::DictionaryState`], a
//! transaction-local view of the keys it acquired, and the runtime applies
//! the resulting operation log to the actor's master state at commit.
//! Keys on different actors can be tied together with dependency records
//! (cascading deletes, replicated values, incremental aggregates); the
//! runtime forwards the relevant slices of each transaction's log to the
//! affected actors within the same transaction.
//!
//! The crate is organized bottom-up:
//!
//! * [`value`], [`types`] — values, keys, actor ids, transaction contexts
//! * [`state`] — per-transaction dictionary views, master state, log apply
//! * [`deps`] — dependency records, update functions, log forwarding
//! * [`wire`] — binary framing for log records and state snapshots
//! * [`wal`] — per-actor append-only log files and replay
//! * [`pact`] — deterministic batching and per-actor/per-key schedules
//! * [`act`] — wait-die lock tables and two-phase commit bookkeeping
//! * [`runtime`] — the simulated cluster: actors, mailboxes, coordinator
//! * [`metrics`] — throughput/latency/abort accounting

pub mod act;
pub mod deps;
pub mod error;
pub mod metrics;
pub mod pact;
pub mod runtime;
pub mod wal;
pub mod wire;
pub mod state;
pub mod types;
pub mod value;

pub use error::{DepError, StateError, TxnError, WalError};
pub use types::{AccessMode, ActorId, Granularity, Key, TxnContext};
pub use value::{Decimal, Value};
