//! Benchmark workloads for the keystone runtime.
//!
//! Two workloads are provided:
//!
//! * [`smallbank::SmallBank`] — a banking mix where every transaction moves
//!   money between four distinct account actors, touching a configurable
//!   number of balance keys per actor. A skewed fraction of the actors
//!   absorbs most of the traffic. The global balance total is invariant.
//! * [`marketplace::Marketplace`] — an online shop spread over eight actor
//!   groups with cross-actor dependencies: cart item prices replicate
//!   product prices, stock entries are deleted with their product, and
//!   per-seller shipment counters aggregate into seller totals.
//!
//! Both expose the same surface through the [`Workload`] trait: group
//! definitions to register on a cluster builder, seed data, a deterministic
//! stream of [`TxnRequest`]s, and an invariant checker that inspects a
//! post-run state dump.

pub mod marketplace;
pub mod smallbank;

use std::collections::BTreeMap;

use keystone::pact::AccessSpec;
use keystone::runtime::{GroupBuilder, SeedData};
use keystone::state::ActorState;
use keystone::{ActorId, Decimal, Granularity, TxnError, Value};

/// Which execution path a generated transaction is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    /// Submit through the deterministic batch scheduler (`submit_pact`),
    /// using the request's [`AccessSpec`].
    Scheduled,
    /// Submit through wait-die locking (`submit_act`); the spec is unused.
    Locked,
}

/// One generated transaction, ready to submit.
#[derive(Debug, Clone)]
pub struct TxnRequest {
    pub lane: Lane,
    pub root: ActorId,
    pub method: &'static str,
    pub args: Value,
    /// Declared accesses for the scheduled path. Empty for [`Lane::Locked`].
    pub spec: AccessSpec,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("workload needs at least {needed} actors, got {got}")]
    InsufficientActors { needed: u32, got: u32 },
    #[error("invalid workload parameter: {0}")]
    InvalidParameter(String),
}

/// Common surface the bench driver uses to run any workload.
pub trait Workload: Send {
    /// Actor groups (with their methods) to register on a cluster builder.
    fn groups(&self) -> Vec<GroupBuilder>;
    /// Initial state to load before the run.
    fn seeds(&self) -> Vec<SeedData>;
    /// Next transaction in the deterministic request stream. `granularity`
    /// shapes the access spec (whole-actor vs per-key declarations).
    fn next_request(&mut self, granularity: Granularity) -> TxnRequest;
    /// Checks workload invariants against a quiesced state dump. Returns one
    /// human-readable line per violation; empty means the dump is sound.
    fn check_invariants(&self, states: &BTreeMap<ActorId, ActorState>) -> Vec<String>;
}

// ---------------------------------------------------------------------------
// Value helpers shared by the workload method bodies. `Value` has no list
// variant, so lists travel as records keyed by their decimal index.

/// Encodes an ordered list as a record keyed `"0"`, `"1"`, ….
pub(crate) fn value_list<I>(items: I) -> Value
where
    I: IntoIterator<Item = Value>,
{
    Value::record(items.into_iter().enumerate().map(|(i, v)| (i.to_string(), v)))
}

/// Decodes a record produced by [`value_list`] back into index order.
pub(crate) fn list_items(v: &Value) -> Option<Vec<&Value>> {
    let rec = v.as_record()?;
    let mut items: Vec<(usize, &Value)> = Vec::with_capacity(rec.len());
    for (k, v) in rec {
        items.push((k.parse().ok()?, v));
    }
    items.sort_unstable_by_key(|(i, _)| *i);
    Some(items.into_iter().map(|(_, v)| v).collect())
}

pub(crate) fn req_field<'a>(args: &'a Value, name: &str) -> Result<&'a Value, TxnError> {
    args.field(name).ok_or_else(|| TxnError::user(format!("missing argument field `{name}`")))
}

pub(crate) fn req_int(args: &Value, name: &str) -> Result<i64, TxnError> {
    req_field(args, name)?
        .as_int()
        .ok_or_else(|| TxnError::user(format!("argument field `{name}` must be an integer")))
}

pub(crate) fn req_decimal(args: &Value, name: &str) -> Result<Decimal, TxnError> {
    req_field(args, name)?
        .as_decimal()
        .ok_or_else(|| TxnError::user(format!("argument field `{name}` must be a decimal")))
}

pub(crate) fn req_list<'a>(args: &'a Value, name: &str) -> Result<Vec<&'a Value>, TxnError> {
    list_items(req_field(args, name)?)
        .ok_or_else(|| TxnError::user(format!("argument field `{name}` must be a list record")))
}
