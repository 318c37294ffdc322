//! Cross-actor key dependencies.
//!
//! A dependency record ties a leader key to a follower key, possibly on
//! another actor. Delete records cascade deletions from leader to
//! follower; update records push every leader write through a named update
//! function to recompute the follower (replication and incremental
//! aggregates are the built-ins). Records live on both actors: under the
//! leader key in the forward direction and as a backward copy under the
//! follower key, so either side's deletion can clean up both ends.
//!
//! [`resolve_forwards`] is the pure core of the mechanism: given the
//! dependency view at the start of a log segment, it scans the segment and
//! produces the operations that must be executed on other actors, grouped
//! per target. The runtime ships those to each target inside the same
//! transaction and repeats until no new operations appear.

use crate::error::{DepError, TxnError};
use crate::state::{DictionaryState, LoggedOp, OpLogEntry};
use crate::types::{ActorId, Key};
use crate::value::Value;
use indexmap::IndexMap;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

/// What deleting the leader means for the follower.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum DepType {
    /// Follower key is deleted when the leader key is deleted.
    Delete,
    /// Follower value is recomputed from leader writes via `function_id`.
    Update,
}

/// One directed dependency edge. Identity is the edge itself — type,
/// leader (actor, key) and follower (actor, key); the update function is
/// payload, not identity.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DependencyRecord {
    pub dep_type: DepType,
    pub leader_actor: ActorId,
    pub leader_key: Key,
    pub follower_actor: ActorId,
    pub follower_key: Key,
    /// Registered update function, required for `Update` records.
    pub function_id: Option<String>,
}

impl DependencyRecord {
    pub fn delete(
        leader_actor: ActorId,
        leader_key: Key,
        follower_actor: ActorId,
        follower_key: Key,
    ) -> Self {
        DependencyRecord {
            dep_type: DepType::Delete,
            leader_actor,
            leader_key,
            follower_actor,
            follower_key,
            function_id: None,
        }
    }

    pub fn update(
        leader_actor: ActorId,
        leader_key: Key,
        follower_actor: ActorId,
        follower_key: Key,
        function_id: impl Into<String>,
    ) -> Self {
        DependencyRecord {
            dep_type: DepType::Update,
            leader_actor,
            leader_key,
            follower_actor,
            follower_key,
            function_id: Some(function_id.into()),
        }
    }

    /// Same edge: equal up to the update function.
    pub fn same_edge(&self, other: &DependencyRecord) -> bool {
        self.dep_type == other.dep_type
            && self.leader_actor == other.leader_actor
            && self.leader_key == other.leader_key
            && self.follower_actor == other.follower_actor
            && self.follower_key == other.follower_key
    }

    /// A key may not depend on itself.
    pub fn is_self_loop(&self) -> bool {
        self.leader_actor == self.follower_actor && self.leader_key == self.follower_key
    }

    pub fn leads_from(&self, actor: &ActorId, key: &Key) -> bool {
        &self.leader_actor == actor && &self.leader_key == key
    }

    pub fn follows_at(&self, actor: &ActorId, key: &Key) -> bool {
        &self.follower_actor == actor && &self.follower_key == key
    }
}

impl fmt::Display for DependencyRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {}:{} -> {}:{}",
            self.dep_type, self.leader_actor, self.leader_key, self.follower_actor, self.follower_key
        )
    }
}

/// An update function recomputes the follower value from a leader write:
/// `(leader_key, old_leader, new_leader, follower_key, follower) -> follower'`.
/// Functions must be pure — they are re-run at registration seeding and on
/// every forwarded leader write.
pub trait UpdateFn: Send + Sync {
    fn apply(
        &self,
        leader_key: &Key,
        old_leader: &Value,
        new_leader: &Value,
        follower_key: &Key,
        follower: &Value,
    ) -> Result<Value, DepError>;
}

impl<F> UpdateFn for F
where
    F: Fn(&Key, &Value, &Value, &Key, &Value) -> Result<Value, DepError> + Send + Sync,
{
    fn apply(
        &self,
        leader_key: &Key,
        old_leader: &Value,
        new_leader: &Value,
        follower_key: &Key,
        follower: &Value,
    ) -> Result<Value, DepError> {
        self(leader_key, old_leader, new_leader, follower_key, follower)
    }
}

/// Built-in: follower becomes a copy of the leader's new value.
pub const FN_REPLICATE: &str = "replicate";
/// Built-in: follower absorbs the leader's delta, `v_f + (new - old)`.
/// Integers and decimals only; all three values must share one type.
pub const FN_SUM_DELTA: &str = "sum_delta";

fn sum_delta(
    _lk: &Key,
    old: &Value,
    new: &Value,
    _fk: &Key,
    follower: &Value,
) -> Result<Value, DepError> {
    let mismatch = |reason: &str| DepError::TypeMismatch {
        function: FN_SUM_DELTA.to_string(),
        reason: reason.to_string(),
    };
    match (old, new, follower) {
        (Value::Int(o), Value::Int(n), Value::Int(f)) => n
            .checked_sub(*o)
            .and_then(|d| f.checked_add(d))
            .map(Value::Int)
            .ok_or_else(|| mismatch("integer overflow")),
        (Value::Decimal(o), Value::Decimal(n), Value::Decimal(f)) => n
            .checked_sub(*o)
            .and_then(|d| f.checked_add(d))
            .map(Value::Decimal)
            .ok_or_else(|| mismatch("decimal overflow")),
        _ => Err(mismatch("requires integer or decimal values of one type")),
    }
}

/// Registry of update functions, populated once at startup and shared by
/// every actor. Records reference functions by id.
#[derive(Clone)]
pub struct FunctionRegistry {
    functions: HashMap<String, Arc<dyn UpdateFn>>,
}

impl FunctionRegistry {
    pub fn empty() -> Self {
        FunctionRegistry { functions: HashMap::new() }
    }

    /// Registry with `replicate` and `sum_delta` pre-installed.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(FN_REPLICATE, |_: &Key, _: &Value, new: &Value, _: &Key, _: &Value| {
            Ok(new.clone())
        })
        .expect("fresh registry");
        reg.register(FN_SUM_DELTA, sum_delta).expect("fresh registry");
        reg
    }

    pub fn register(
        &mut self,
        id: impl Into<String>,
        f: impl UpdateFn + 'static,
    ) -> Result<(), DepError> {
        let id = id.into();
        if self.functions.contains_key(&id) {
            return Err(DepError::DuplicateFunctionId(id));
        }
        self.functions.insert(id, Arc::new(f));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn UpdateFn>, DepError> {
        self.functions
            .get(id)
            .cloned()
            .ok_or_else(|| DepError::UnknownFunction(id.to_string()))
    }
}

impl fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionRegistry")
            .field("functions", &self.functions.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Cycle-prevention strategy enforced at registration time.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CyclePolicy {
    /// Default: a key never holds both roles — follower keys may not lead
    /// and leader keys may not follow. Cheap, local, rules out all cycles.
    RejectDualRole,
    /// Permissive: keys may chain. Registering an update record triggers a
    /// bounded walk along existing update edges to reject a cycle being
    /// closed; delete records register unchecked (delete cascades
    /// terminate on their own because each key is deleted at most once).
    ProbeUpdateCycles { hop_limit: u32 },
}

impl Default for CyclePolicy {
    fn default() -> Self {
        CyclePolicy::RejectDualRole
    }
}

/// Read access to the live dependency graph, for the registration-time
/// cycle probe. Implemented by the cluster over master states.
pub trait DepProbe {
    /// Update edges leaving `key` on `actor`: the (actor, key) each update
    /// record under that leader key points to.
    fn outgoing_updates(&self, actor: &ActorId, key: &Key) -> Vec<(ActorId, Key)>;
}

/// Breadth-first reachability along update edges, bounded by `hop_limit`
/// traversed edges. Used to detect that adding `leader -> follower` would
/// close a cycle: a cycle exists iff the leader is reachable from the
/// follower.
pub fn update_cycle_exists(
    probe: &dyn DepProbe,
    from: (&ActorId, &Key),
    to: (&ActorId, &Key),
    hop_limit: u32,
) -> Result<bool, DepError> {
    if from.0 == to.0 && from.1 == to.1 {
        return Ok(true);
    }
    let mut visited: HashSet<(ActorId, Key)> = HashSet::new();
    let mut frontier = VecDeque::new();
    frontier.push_back((from.0.clone(), from.1.clone()));
    visited.insert((from.0.clone(), from.1.clone()));
    let mut hops = 0u32;
    while let Some((actor, key)) = frontier.pop_front() {
        for (next_actor, next_key) in probe.outgoing_updates(&actor, &key) {
            hops += 1;
            if hops > hop_limit {
                return Err(DepError::HopLimitExceeded(hop_limit));
            }
            if &next_actor == to.0 && &next_key == to.1 {
                return Ok(true);
            }
            if visited.insert((next_actor.clone(), next_key.clone())) {
                frontier.push_back((next_actor, next_key));
            }
        }
    }
    Ok(false)
}

/// Follower-side registration check, run on the follower actor against the
/// records currently attached to the candidate follower key.
pub fn check_follower_eligibility(
    me: &ActorId,
    follower_records: &[DependencyRecord],
    candidate: &DependencyRecord,
    policy: CyclePolicy,
    probe: &dyn DepProbe,
) -> Result<(), DepError> {
    match policy {
        CyclePolicy::RejectDualRole => {
            let leads = follower_records
                .iter()
                .any(|r| r.leads_from(me, &candidate.follower_key));
            if leads {
                return Err(DepError::FollowerIneligible(candidate.follower_key.clone()));
            }
            Ok(())
        }
        CyclePolicy::ProbeUpdateCycles { hop_limit } => {
            if candidate.dep_type != DepType::Update {
                return Ok(());
            }
            let closes_cycle = update_cycle_exists(
                probe,
                (&candidate.follower_actor, &candidate.follower_key),
                (&candidate.leader_actor, &candidate.leader_key),
                hop_limit,
            )?;
            if closes_cycle {
                return Err(DepError::FollowerIneligible(candidate.follower_key.clone()));
            }
            Ok(())
        }
    }
}

/// Leader-side registration check, run on the leader actor. `exists` is
/// whether the leader key is present in the registering transaction's view.
pub fn check_leader_eligibility(
    me: &ActorId,
    leader_records: &[DependencyRecord],
    exists: bool,
    candidate: &DependencyRecord,
    policy: CyclePolicy,
) -> Result<(), DepError> {
    if !exists {
        return Err(DepError::LeaderKeyMissing(candidate.leader_key.clone()));
    }
    if policy == CyclePolicy::RejectDualRole {
        let follows = leader_records
            .iter()
            .any(|r| r.follows_at(me, &candidate.leader_key));
        if follows {
            return Err(DepError::LeaderIneligible(candidate.leader_key.clone()));
        }
    }
    if leader_records.iter().any(|r| r.same_edge(candidate)) {
        return Err(DepError::DuplicateDependency {
            leader: candidate.leader_key.clone(),
            follower: candidate.follower_key.clone(),
        });
    }
    Ok(())
}

/// One operation shipped to another actor because of a dependency record.
#[derive(Clone, PartialEq, Debug)]
pub enum ForwardedOp {
    /// Leader write: recompute the follower through the record's function.
    ApplyUpdate {
        record: DependencyRecord,
        old_leader: Value,
        new_leader: Value,
    },
    /// Leader delete along a delete record: delete the follower too.
    CascadeDelete { record: DependencyRecord },
    /// Leader key vanished: drop the backward copy held by the follower.
    DeregisterAtFollower { record: DependencyRecord },
    /// Follower key vanished: drop the forward record held by the leader.
    DeregisterAtLeader { record: DependencyRecord },
}

impl ForwardedOp {
    /// The actor that must execute this operation.
    pub fn target(&self) -> &ActorId {
        match self {
            ForwardedOp::ApplyUpdate { record, .. }
            | ForwardedOp::CascadeDelete { record }
            | ForwardedOp::DeregisterAtFollower { record } => &record.follower_actor,
            ForwardedOp::DeregisterAtLeader { record } => &record.leader_actor,
        }
    }

    /// The key on the target actor this operation reads or writes.
    pub fn target_key(&self) -> &Key {
        match self {
            ForwardedOp::ApplyUpdate { record, .. }
            | ForwardedOp::CascadeDelete { record }
            | ForwardedOp::DeregisterAtFollower { record } => &record.follower_key,
            ForwardedOp::DeregisterAtLeader { record } => &record.leader_key,
        }
    }
}

/// Forwarded operations grouped per target actor; per-target order follows
/// the source log's order.
pub type ForwardSet = IndexMap<ActorId, Vec<ForwardedOp>>;

/// Scans a log segment and derives the operations other actors must run.
///
/// `initial_records(key)` must return the dependency view of `key` as of
/// the segment start; register/deregister entries inside the segment are
/// folded in as the scan advances, so an op always sees the records in
/// force at its own position. Pure: no state is modified.
///
/// Rules, per scanned op on key `k` of actor `me`:
/// * Put and `k` leads an update record → `ApplyUpdate` at the follower.
///   Delete records ignore leader writes.
/// * Delete and `k` leads a record → `CascadeDelete` at the follower for
///   delete records, plus `DeregisterAtFollower` for every led record.
/// * Delete and `k` follows a record (backward copy) →
///   `DeregisterAtLeader` at the leader.
/// * Register/deregister entries forward nothing themselves.
pub fn resolve_forwards(
    me: &ActorId,
    initial_records: impl Fn(&Key) -> Vec<DependencyRecord>,
    ops: &[OpLogEntry],
) -> ForwardSet {
    let mut view: HashMap<Key, Vec<DependencyRecord>> = HashMap::new();
    let mut out: ForwardSet = IndexMap::new();
    let mut push = |op: ForwardedOp| {
        out.entry(op.target().clone()).or_default().push(op);
    };

    for entry in ops {
        let key = entry.op.key().clone();
        let records = view
            .entry(key.clone())
            .or_insert_with(|| initial_records(&key));
        match &entry.op {
            LoggedOp::Put { before, after, .. } => {
                for r in records.iter() {
                    if r.leads_from(me, &key) && r.dep_type == DepType::Update {
                        push(ForwardedOp::ApplyUpdate {
                            record: r.clone(),
                            // A leader insert with live records cannot
                            // happen (registration requires existence);
                            // degrade to a zero delta if it ever does.
                            old_leader: before.clone().unwrap_or_else(|| after.clone()),
                            new_leader: after.clone(),
                        });
                    }
                }
            }
            LoggedOp::Delete { .. } => {
                for r in records.iter() {
                    if r.leads_from(me, &key) {
                        if r.dep_type == DepType::Delete {
                            push(ForwardedOp::CascadeDelete { record: r.clone() });
                        }
                        push(ForwardedOp::DeregisterAtFollower { record: r.clone() });
                    } else if r.follows_at(me, &key) {
                        push(ForwardedOp::DeregisterAtLeader { record: r.clone() });
                    }
                }
            }
            LoggedOp::RegisterDep { dep, .. } => {
                records.push(dep.clone());
            }
            LoggedOp::DeregisterDep { dep, .. } => {
                if let Some(pos) = records.iter().position(|r| r.same_edge(dep)) {
                    records.remove(pos);
                }
            }
        }
    }
    out
}

/// Outcome of a dependency registration, reported to the registering
/// transaction.
#[derive(Clone, PartialEq, Debug)]
pub struct RegistrationResult {
    /// True when the follower key did not exist and was created.
    pub seeded: bool,
    /// Follower value after registration.
    pub value: Value,
}

/// Follower-side completion of a registration: attach the backward copy
/// and seed or refresh the follower value from the leader's current value
/// (update functions run once with `old = new = leader value`).
pub fn seed_follower(
    dict: &mut DictionaryState,
    registry: &FunctionRegistry,
    record: &DependencyRecord,
    leader_value: &Value,
) -> Result<RegistrationResult, TxnError> {
    dict.add_dep_record(record.follower_key.clone(), record.clone())?;
    let current = dict.get(&record.follower_key)?.cloned();
    match current {
        None => {
            dict.put(record.follower_key.clone(), leader_value.clone())?;
            Ok(RegistrationResult { seeded: true, value: leader_value.clone() })
        }
        Some(existing) => {
            let value = match (&record.dep_type, &record.function_id) {
                (DepType::Update, Some(id)) => {
                    let f = registry.get(id)?;
                    let refreshed = f.apply(
                        &record.leader_key,
                        leader_value,
                        leader_value,
                        &record.follower_key,
                        &existing,
                    )?;
                    dict.put(record.follower_key.clone(), refreshed.clone())?;
                    refreshed
                }
                _ => existing,
            };
            Ok(RegistrationResult { seeded: false, value })
        }
    }
}

/// Executes forwarded operations against the target actor's transaction
/// view. Every touched follower/leader key must already be acquired; the
/// resulting log entries are picked up by the caller's forwarding driver,
/// which is what makes cascades propagate further.
pub fn apply_forwarded_ops(
    dict: &mut DictionaryState,
    registry: &FunctionRegistry,
    ops: &[ForwardedOp],
) -> Result<(), TxnError> {
    for op in ops {
        match op {
            ForwardedOp::ApplyUpdate { record, old_leader, new_leader } => {
                let Some(current) = dict.get(&record.follower_key)?.cloned() else {
                    // Follower vanished in this same transaction after the
                    // leader write was resolved; the matching deregister is
                    // already in flight, so the update has nowhere to land.
                    continue;
                };
                let id = record.function_id.as_deref().ok_or_else(|| {
                    TxnError::Dep(DepError::UnknownFunction("<missing>".into()))
                })?;
                let f = registry.get(id)?;
                let next = f.apply(
                    &record.leader_key,
                    old_leader,
                    new_leader,
                    &record.follower_key,
                    &current,
                )?;
                dict.put(record.follower_key.clone(), next)?;
            }
            ForwardedOp::CascadeDelete { record } => {
                if dict.get(&record.follower_key)?.is_some() {
                    dict.delete(&record.follower_key)?;
                }
            }
            ForwardedOp::DeregisterAtFollower { record } => {
                dict.remove_dep_record(&record.follower_key, record)?;
            }
            ForwardedOp::DeregisterAtLeader { record } => {
                dict.remove_dep_record(&record.leader_key, record)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::DictionaryState;
    use crate::types::{AccessMode, Granularity, TxnContext};
    use crate::value::Decimal;

    fn aid(g: &str, p: u32) -> ActorId {
        ActorId::new(g, p)
    }

    fn key(ns: &str, id: &str) -> Key {
        Key::new(ns, id)
    }

    fn ctx() -> TxnContext {
        TxnContext::pact(1, 1, Granularity::KeyLevel)
    }

    #[test]
    fn replicate_copies_new_leader_value() {
        let reg = FunctionRegistry::with_builtins();
        let f = reg.get(FN_REPLICATE).unwrap();
        let out = f
            .apply(
                &key("p", "1"),
                &Value::Int(1),
                &Value::text("hello"),
                &key("c", "1"),
                &Value::Int(42),
            )
            .unwrap();
        assert_eq!(out, Value::text("hello"));
    }

    #[test]
    fn sum_delta_adds_leader_delta() {
        let reg = FunctionRegistry::with_builtins();
        let f = reg.get(FN_SUM_DELTA).unwrap();
        let out = f
            .apply(&key("l", "1"), &Value::Int(3), &Value::Int(5), &key("v", "1"), &Value::Int(100))
            .unwrap();
        assert_eq!(out, Value::Int(102));

        let d = |s: &str| Value::Decimal(s.parse::<Decimal>().unwrap());
        let out = f
            .apply(&key("l", "1"), &d("1.5"), &d("0.5"), &key("v", "1"), &d("10.0"))
            .unwrap();
        assert_eq!(out, d("9.0"));
    }

    #[test]
    fn sum_delta_rejects_mixed_types() {
        let reg = FunctionRegistry::with_builtins();
        let f = reg.get(FN_SUM_DELTA).unwrap();
        let err = f
            .apply(
                &key("l", "1"),
                &Value::Int(3),
                &Value::text("no"),
                &key("v", "1"),
                &Value::Int(1),
            )
            .unwrap_err();
        assert!(matches!(err, DepError::TypeMismatch { .. }));
    }

    #[test]
    fn registry_rejects_duplicates_and_unknown_lookups() {
        let mut reg = FunctionRegistry::with_builtins();
        let err = reg
            .register(FN_REPLICATE, |_: &Key, _: &Value, n: &Value, _: &Key, _: &Value| {
                Ok(n.clone())
            })
            .unwrap_err();
        assert_eq!(err, DepError::DuplicateFunctionId(FN_REPLICATE.to_string()));
        assert!(matches!(reg.get("nope"), Err(DepError::UnknownFunction(_))));
    }

    #[test]
    fn edge_identity_ignores_function_id() {
        let a = DependencyRecord::update(aid("a", 0), key("k", "l"), aid("b", 0), key("k", "f"), "replicate");
        let mut b = a.clone();
        b.function_id = Some("sum_delta".to_string());
        assert!(a.same_edge(&b));
        assert_ne!(a, b);
    }

    struct StaticProbe(Vec<(ActorId, Key, ActorId, Key)>);

    impl DepProbe for StaticProbe {
        fn outgoing_updates(&self, actor: &ActorId, k: &Key) -> Vec<(ActorId, Key)> {
            self.0
                .iter()
                .filter(|(a, from, _, _)| a == actor && from == k)
                .map(|(_, _, ta, tk)| (ta.clone(), tk.clone()))
                .collect()
        }
    }

    #[test]
    fn dual_role_policy_blocks_both_roles() {
        let me = aid("cart", 3);
        let existing = DependencyRecord::update(me.clone(), key("i", "7"), aid("x", 0), key("y", "0"), "replicate");
        // key i/7 already leads `existing`; it may not become a follower.
        let candidate =
            DependencyRecord::update(aid("p", 0), key("p", "9"), me.clone(), key("i", "7"), "replicate");
        let probe = StaticProbe(vec![]);
        let err = check_follower_eligibility(
            &me,
            std::slice::from_ref(&existing),
            &candidate,
            CyclePolicy::RejectDualRole,
            &probe,
        )
        .unwrap_err();
        assert_eq!(err, DepError::FollowerIneligible(key("i", "7")));

        // Mirror image: a key that follows may not become a leader.
        let lead_candidate =
            DependencyRecord::update(me.clone(), key("i", "7"), aid("z", 0), key("z", "1"), "replicate");
        let backward =
            DependencyRecord::update(aid("p", 0), key("p", "9"), me.clone(), key("i", "7"), "replicate");
        let err = check_leader_eligibility(
            &me,
            std::slice::from_ref(&backward),
            true,
            &lead_candidate,
            CyclePolicy::RejectDualRole,
        )
        .unwrap_err();
        assert_eq!(err, DepError::LeaderIneligible(key("i", "7")));
    }

    #[test]
    fn leader_checks_existence_and_duplicates() {
        let me = aid("p", 0);
        let candidate =
            DependencyRecord::update(me.clone(), key("p", "1"), aid("c", 0), key("i", "1"), "replicate");
        let err =
            check_leader_eligibility(&me, &[], false, &candidate, CyclePolicy::RejectDualRole)
                .unwrap_err();
        assert_eq!(err, DepError::LeaderKeyMissing(key("p", "1")));

        let err = check_leader_eligibility(
            &me,
            std::slice::from_ref(&candidate),
            true,
            &candidate,
            CyclePolicy::RejectDualRole,
        )
        .unwrap_err();
        assert!(matches!(err, DepError::DuplicateDependency { .. }));
    }

    #[test]
    fn probe_policy_rejects_closing_an_update_cycle() {
        // Existing update chain: k1 -> k2 -> k3 across three actors.
        let (a1, a2, a3) = (aid("a", 1), aid("a", 2), aid("a", 3));
        let (k1, k2, k3) = (key("k", "1"), key("k", "2"), key("k", "3"));
        let probe = StaticProbe(vec![
            (a1.clone(), k1.clone(), a2.clone(), k2.clone()),
            (a2.clone(), k2.clone(), a3.clone(), k3.clone()),
        ]);
        // Candidate closes the loop: leader k3, follower k1.
        let candidate = DependencyRecord::update(a3, k3, a1.clone(), k1, "replicate");
        let err = check_follower_eligibility(
            &a1,
            &[],
            &candidate,
            CyclePolicy::ProbeUpdateCycles { hop_limit: 16 },
            &probe,
        )
        .unwrap_err();
        assert!(matches!(err, DepError::FollowerIneligible(_)));
    }

    #[test]
    fn probe_policy_lets_delete_cycles_through() {
        let (a1, a2) = (aid("a", 1), aid("a", 2));
        let (k1, k2) = (key("k", "1"), key("k", "2"));
        // Even with an update edge back, a *delete* record registers
        // without a probe — cascades visit each key at most once.
        let probe = StaticProbe(vec![(a2.clone(), k2.clone(), a1.clone(), k1.clone())]);
        let candidate = DependencyRecord::delete(a1.clone(), k1, a2, k2);
        check_follower_eligibility(
            &a1,
            &[],
            &candidate,
            CyclePolicy::ProbeUpdateCycles { hop_limit: 16 },
            &probe,
        )
        .unwrap();
    }

    #[test]
    fn probe_hop_limit_surfaces() {
        // Long chain, tiny budget.
        let mut edges = Vec::new();
        for i in 0..10 {
            edges.push((
                aid("a", i),
                key("k", &i.to_string()),
                aid("a", i + 1),
                key("k", &(i + 1).to_string()),
            ));
        }
        let probe = StaticProbe(edges);
        let err = update_cycle_exists(
            &probe,
            (&aid("a", 0), &key("k", "0")),
            (&aid("z", 0), &key("z", "0")),
            3,
        )
        .unwrap_err();
        assert_eq!(err, DepError::HopLimitExceeded(3));
    }

    fn dict_with(
        me_keys: &[(&Key, Option<Value>, Vec<DependencyRecord>)],
    ) -> DictionaryState {
        let mut ds = DictionaryState::new(ctx());
        for (k, v, deps) in me_keys {
            ds.acquire((*k).clone(), AccessMode::ReadWrite, v.clone(), deps.clone());
        }
        ds
    }

    #[test]
    fn leader_put_forwards_one_update_per_record() {
        let me = aid("product", 0);
        let pk = key("p", "42");
        let r1 = DependencyRecord::update(me.clone(), pk.clone(), aid("cart", 1), key("i", "42"), "replicate");
        let r2 = DependencyRecord::update(me.clone(), pk.clone(), aid("cart", 2), key("i", "42"), "replicate");
        let mut ds = dict_with(&[(&pk, Some(Value::Int(10)), vec![r1.clone(), r2.clone()])]);
        ds.put(pk.clone(), Value::Int(11)).unwrap();

        let fs = resolve_forwards(&me, |k| ds.records_at(k, 0), ds.ops());
        assert_eq!(fs.len(), 2);
        assert_eq!(
            fs[&aid("cart", 1)],
            vec![ForwardedOp::ApplyUpdate {
                record: r1,
                old_leader: Value::Int(10),
                new_leader: Value::Int(11),
            }]
        );
        assert_eq!(fs[&aid("cart", 2)].len(), 1);
    }

    #[test]
    fn leader_delete_fans_out_cascades_and_deregisters() {
        let me = aid("product", 0);
        let pk = key("p", "42");
        let to_stock = DependencyRecord::delete(me.clone(), pk.clone(), aid("stock", 0), key("s", "42"));
        let to_cart = DependencyRecord::update(me.clone(), pk.clone(), aid("cart", 3), key("i", "42"), "replicate");
        let mut ds = dict_with(&[(
            &pk,
            Some(Value::Int(10)),
            vec![to_stock.clone(), to_cart.clone()],
        )]);
        ds.delete(&pk).unwrap();

        let fs = resolve_forwards(&me, |k| ds.records_at(k, 0), ds.ops());
        assert_eq!(
            fs[&aid("stock", 0)],
            vec![
                ForwardedOp::CascadeDelete { record: to_stock.clone() },
                ForwardedOp::DeregisterAtFollower { record: to_stock },
            ]
        );
        assert_eq!(
            fs[&aid("cart", 3)],
            vec![ForwardedOp::DeregisterAtFollower { record: to_cart }]
        );
    }

    #[test]
    fn follower_delete_deregisters_at_leader() {
        let me = aid("cart", 3);
        let ik = key("i", "42");
        let backward =
            DependencyRecord::update(aid("product", 0), key("p", "42"), me.clone(), ik.clone(), "replicate");
        let mut ds = dict_with(&[(&ik, Some(Value::Int(10)), vec![backward.clone()])]);
        ds.delete(&ik).unwrap();

        let fs = resolve_forwards(&me, |k| ds.records_at(k, 0), ds.ops());
        assert_eq!(fs.len(), 1);
        assert_eq!(
            fs[&aid("product", 0)],
            vec![ForwardedOp::DeregisterAtLeader { record: backward }]
        );
    }

    #[test]
    fn forwarding_sees_same_segment_registrations() {
        let me = aid("a", 0);
        let lk = key("l", "1");
        let rec = DependencyRecord::update(me.clone(), lk.clone(), aid("b", 0), key("f", "1"), "replicate");
        let mut ds = dict_with(&[(&lk, Some(Value::Int(1)), vec![])]);
        ds.add_dep_record(lk.clone(), rec.clone()).unwrap();
        ds.put(lk.clone(), Value::Int(2)).unwrap();

        let fs = resolve_forwards(&me, |k| ds.records_at(k, 0), ds.ops());
        assert_eq!(fs[&aid("b", 0)].len(), 1, "put after in-segment register forwards");

        // And the inverse: a deregister stops later puts from forwarding.
        let mut ds2 = dict_with(&[(&lk, Some(Value::Int(1)), vec![rec.clone()])]);
        ds2.remove_dep_record(&lk, &rec).unwrap();
        ds2.put(lk.clone(), Value::Int(3)).unwrap();
        let fs2 = resolve_forwards(&me, |k| ds2.records_at(k, 0), ds2.ops());
        assert!(fs2.is_empty());
    }

    #[test]
    fn empty_segment_forwards_nothing() {
        let me = aid("a", 0);
        let ds = dict_with(&[(&key("k", "1"), Some(Value::Int(1)), vec![])]);
        assert!(resolve_forwards(&me, |k| ds.records_at(k, 0), ds.ops()).is_empty());
    }

    #[test]
    fn apply_update_recomputes_follower() {
        let reg = FunctionRegistry::with_builtins();
        let record =
            DependencyRecord::update(aid("l", 0), key("l", "1"), aid("f", 0), key("f", "1"), "sum_delta");
        let mut ds = dict_with(&[(&key("f", "1"), Some(Value::Int(100)), vec![record.clone()])]);
        apply_forwarded_ops(
            &mut ds,
            &reg,
            &[ForwardedOp::ApplyUpdate {
                record,
                old_leader: Value::Int(3),
                new_leader: Value::Int(5),
            }],
        )
        .unwrap();
        assert_eq!(ds.get(&key("f", "1")).unwrap(), Some(&Value::Int(102)));
    }

    #[test]
    fn cascade_delete_applies_once_and_is_idempotent() {
        let reg = FunctionRegistry::with_builtins();
        let record = DependencyRecord::delete(aid("l", 0), key("l", "1"), aid("f", 0), key("f", "1"));
        let mut ds = dict_with(&[(&key("f", "1"), Some(Value::Int(1)), vec![record.clone()])]);
        let ops = [
            ForwardedOp::CascadeDelete { record: record.clone() },
            ForwardedOp::DeregisterAtFollower { record: record.clone() },
        ];
        apply_forwarded_ops(&mut ds, &reg, &ops).unwrap();
        assert_eq!(ds.get(&key("f", "1")).unwrap(), None);
        assert!(ds.live_records(&key("f", "1")).is_empty());
        // Replaying the same forwarded ops must not fail or re-log.
        let logged = ds.ops().len();
        apply_forwarded_ops(&mut ds, &reg, &ops).unwrap();
        assert_eq!(ds.ops().len(), logged);
    }

    #[test]
    fn seeding_inserts_or_refreshes_follower() {
        let reg = FunctionRegistry::with_builtins();
        let record =
            DependencyRecord::update(aid("l", 0), key("l", "1"), aid("f", 0), key("f", "1"), "replicate");

        let mut fresh = dict_with(&[(&key("f", "1"), None, vec![])]);
        let out = seed_follower(&mut fresh, &reg, &record, &Value::Int(7)).unwrap();
        assert_eq!(out, RegistrationResult { seeded: true, value: Value::Int(7) });
        assert_eq!(fresh.get(&key("f", "1")).unwrap(), Some(&Value::Int(7)));
        assert_eq!(fresh.live_records(&key("f", "1")).len(), 1);

        let mut existing = dict_with(&[(&key("f", "1"), Some(Value::Int(1)), vec![])]);
        let out = seed_follower(&mut existing, &reg, &record, &Value::Int(9)).unwrap();
        assert_eq!(out, RegistrationResult { seeded: false, value: Value::Int(9) });
        assert_eq!(existing.get(&key("f", "1")).unwrap(), Some(&Value::Int(9)));
    }
}
