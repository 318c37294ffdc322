//! The in-process simulated cluster: actor cells, the scheduling
//! coordinator, and transaction drivers.
//!
//! One [`Cluster`] hosts every actor. Actors are created on first use and
//! never migrate. Each actor is a cell whose metadata (master state, batch
//! progress, lock table) is mutated under a short-lived mutex; transaction
//! logic runs as ordinary tasks that suspend on the cell's notifier while
//! waiting for a schedule turn or a lock, so a blocked transaction never
//! prevents other activations from making progress on the same actor.
//!
//! Three execution paths share the same method bodies:
//!
//! * **Scheduled** (`submit_pact`): the coordinator assigns a transaction
//!   id, batches requests, and emits a deterministic per-actor (or
//!   per-key) schedule. Turns are granted in schedule order, effects are
//!   buffered per transaction, and each actor writes one log record and
//!   applies the whole batch when its part is done. Handles resolve when
//!   the batch commits.
//! * **Lock-based** (`submit_act`): wait-die locking at the actor's
//!   configured granularity plus two-phase commit across the touched
//!   actors. Aborted attempts leave no trace; the submitter may retry
//!   with a fresh, younger transaction id.
//! * **Unprotected** (`submit_non_txn`): direct execution with no
//!   scheduling, locks, logging, or atomicity. An upper-bound baseline.
//!
//! Dependency forwarding runs inside every path: when an activation
//! finishes, the new slice of its operation log is resolved against the
//! dependency records in scope and the resulting operations are delivered
//! to the affected actors within the same transaction, repeated to a fixed
//! point.

mod cell;
mod cluster;
mod txn;

pub use cluster::{Cluster, ClusterBuilder, GroupBuilder, SeedData, TraceSummary, TxnHandle};
pub use txn::{method_fn, BoxFut, MethodCtx, MethodFn};
