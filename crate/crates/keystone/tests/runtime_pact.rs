//! End-to-end tests for the scheduled (deterministic batch) path: atomic
//! cross-actor commits, equivalence to serial execution in id order,
//! whole-batch failure on undeclared accesses, and run-to-run determinism.

use keystone::error::AbortCause;
use keystone::pact::AccessSpec;
use keystone::runtime::{method_fn, BoxFut, Cluster, GroupBuilder, MethodCtx, SeedData};
use keystone::types::{AccessMode, ActorId, Granularity, Key};
use keystone::value::Value;
use keystone::TxnError;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::BTreeMap;
use std::time::Duration;

fn acct(p: u32) -> ActorId {
    ActorId::new("acct", p)
}

fn bal() -> Key {
    Key::new("b", "bal")
}

fn deposit<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let amount = args.field("amount").and_then(Value::as_int).unwrap_or(0);
        let cur = ctx.get(&bal()).await?.and_then(|v| v.as_int()).unwrap_or(0);
        ctx.put(bal(), Value::Int(cur + amount)).await?;
        Ok(Value::Int(cur + amount))
    })
}

/// Moves `amount` from the root actor's balance to `dst`'s. Balances may
/// go negative; the logic is total so every transaction commits.
fn transfer<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let amount = args.field("amount").and_then(Value::as_int).unwrap_or(0);
        let dst = acct(args.field("dst").and_then(Value::as_int).unwrap_or(0) as u32);
        let cur = ctx.get(&bal()).await?.and_then(|v| v.as_int()).unwrap_or(0);
        ctx.put(bal(), Value::Int(cur - amount)).await?;
        if dst == *ctx.current_actor() {
            let cur = ctx.get(&bal()).await?.and_then(|v| v.as_int()).unwrap_or(0);
            ctx.put(bal(), Value::Int(cur + amount)).await?;
        } else {
            ctx.call_actor(dst, "deposit", Value::record([("amount", Value::Int(amount))]))
                .await?;
        }
        Ok(Value::Int(0))
    })
}

/// Inserts a fresh key on the root actor.
fn insert_item<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let id = args.field("id").and_then(|v| v.as_text().map(String::from)).unwrap_or_default();
        ctx.put(Key::new("item", id), Value::Int(1)).await?;
        Ok(Value::Int(0))
    })
}

/// Returns how many keys the root actor currently shows.
fn count_keys<'a>(ctx: &'a mut MethodCtx, _args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let keys = ctx.state_keys().await?;
        Ok(Value::Int(keys.len() as i64))
    })
}

/// A cluster whose batches form only on explicit `flush()` calls, so tests
/// control batch composition exactly.
fn build(partitions: u32, granularity: Granularity) -> Cluster {
    Cluster::builder()
        .granularity(granularity)
        .max_batch_size(usize::MAX)
        .max_batch_delay(Duration::from_secs(3600))
        .group(
            GroupBuilder::new("acct", partitions)
                .method("deposit", method_fn(deposit))
                .method("transfer", method_fn(transfer))
                .method("insert_item", method_fn(insert_item))
                .method("count_keys", method_fn(count_keys)),
        )
        .build()
        .expect("cluster builds")
}

async fn seed_balances(cluster: &Cluster, partitions: u32, amount: i64) {
    let seeds = (0..partitions)
        .map(|p| {
            let mut s = SeedData::new(acct(p));
            s.kv.push((bal(), Value::Int(amount)));
            s
        })
        .collect();
    cluster.seed(seeds).await.expect("seed");
}

fn transfer_spec(granularity: Granularity, src: u32, dst: u32) -> AccessSpec {
    match granularity {
        Granularity::ActorLevel => AccessSpec::new().actor(acct(src), 1).actor(acct(dst), 1),
        Granularity::KeyLevel => AccessSpec::new()
            .keys(acct(src), 1, [(bal(), AccessMode::ReadWrite)])
            .keys(acct(dst), 1, [(bal(), AccessMode::ReadWrite)]),
    }
}

fn transfer_args(dst: u32, amount: i64) -> Value {
    Value::record([("dst", Value::Int(dst as i64)), ("amount", Value::Int(amount))])
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn single_transfer_commits_atomically() {
    for granularity in [Granularity::ActorLevel, Granularity::KeyLevel] {
        let cluster = build(2, granularity);
        seed_balances(&cluster, 2, 1000).await;
        let h = cluster
            .submit_pact(acct(0), "transfer", transfer_args(1, 250), transfer_spec(granularity, 0, 1))
            .await
            .expect("submit");
        cluster.flush().expect("flush");
        h.wait().await.expect("commit");
        let a = cluster.master_snapshot(&acct(0)).unwrap();
        let b = cluster.master_snapshot(&acct(1)).unwrap();
        assert_eq!(a.kv.get(&bal()).and_then(Value::as_int), Some(750));
        assert_eq!(b.kv.get(&bal()).and_then(Value::as_int), Some(1250));
        cluster.shutdown().await.expect("shutdown");
    }
}

/// The core serializability oracle: many concurrent multi-actor transfers,
/// split across several batches, must leave exactly the state produced by
/// running them one at a time in ascending transaction-id order.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_transfers_match_serial_id_order() {
    for granularity in [Granularity::ActorLevel, Granularity::KeyLevel] {
        let partitions = 8u32;
        let cluster = build(partitions, granularity);
        seed_balances(&cluster, partitions, 1000).await;

        let mut rng = StdRng::seed_from_u64(0xACED);
        let mut issued: Vec<(u64, u32, u32, i64)> = Vec::new();
        let mut handles = Vec::new();
        for _ in 0..200 {
            let src = rng.gen_range(0..partitions);
            let mut dst = rng.gen_range(0..partitions - 1);
            if dst >= src {
                dst += 1;
            }
            let amount = rng.gen_range(1..100i64);
            let h = cluster
                .submit_pact(
                    acct(src),
                    "transfer",
                    transfer_args(dst, amount),
                    transfer_spec(granularity, src, dst),
                )
                .await
                .expect("submit");
            issued.push((h.tid(), src, dst, amount));
            handles.push(h);
            if rng.gen_bool(0.25) {
                cluster.flush().expect("flush");
            }
        }
        cluster.flush().expect("flush");
        for h in handles {
            h.wait().await.expect("every transfer commits");
        }

        let mut model: BTreeMap<u32, i64> = (0..partitions).map(|p| (p, 1000)).collect();
        issued.sort_by_key(|t| t.0);
        for (_, src, dst, amount) in &issued {
            *model.get_mut(src).unwrap() -= amount;
            *model.get_mut(dst).unwrap() += amount;
        }
        for p in 0..partitions {
            let st = cluster.master_snapshot(&acct(p)).unwrap();
            assert_eq!(
                st.kv.get(&bal()).and_then(Value::as_int),
                Some(model[&p]),
                "balance mismatch on partition {p} under {granularity:?}"
            );
        }
        assert_eq!(model.values().sum::<i64>(), 8 * 1000, "conservation");
        cluster.shutdown().await.expect("shutdown");
    }
}

/// Later transactions in a batch see earlier members' buffered effects:
/// an insert by a lower id is visible to a key enumeration by a higher id
/// on the same actor, before anything is committed.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn batch_members_observe_predecessor_effects() {
    let cluster = build(1, Granularity::ActorLevel);
    let mut seed = SeedData::new(acct(0));
    seed.kv.push((Key::new("item", "base"), Value::Int(1)));
    cluster.seed(vec![seed]).await.unwrap();

    let h1 = cluster
        .submit_pact(
            acct(0),
            "insert_item",
            Value::record([("id", Value::text("fresh"))]),
            AccessSpec::new().actor(acct(0), 1),
        )
        .await
        .unwrap();
    let h2 = cluster
        .submit_pact(acct(0), "count_keys", Value::Int(0), AccessSpec::new().actor(acct(0), 1))
        .await
        .unwrap();
    cluster.flush().unwrap();
    h1.wait().await.expect("insert commits");
    let count = h2.wait().await.expect("count commits");
    assert_eq!(count, Value::Int(2), "the second member sees the first member's insert");
    cluster.shutdown().await.unwrap();
}

/// One member touching an undeclared actor kills the whole batch: the
/// offender reports the undeclared access, innocents report a batch
/// failure, nothing is applied, and the next batch still runs.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn undeclared_access_fails_the_whole_batch() {
    let cluster = build(4, Granularity::ActorLevel);
    seed_balances(&cluster, 4, 1000).await;

    let innocent = cluster
        .submit_pact(acct(0), "transfer", transfer_args(1, 100), transfer_spec(Granularity::ActorLevel, 0, 1))
        .await
        .unwrap();
    // Declares only the root actor, then calls into actor 3.
    let offender = cluster
        .submit_pact(acct(2), "transfer", transfer_args(3, 100), AccessSpec::new().actor(acct(2), 1))
        .await
        .unwrap();
    cluster.flush().unwrap();

    let offender_err = offender.wait().await.expect_err("undeclared access must fail");
    assert!(
        matches!(offender_err, TxnError::UndeclaredAccess { .. }),
        "offender error: {offender_err:?}"
    );
    let innocent_err = innocent.wait().await.expect_err("innocent member fails with the batch");
    assert!(
        matches!(innocent_err, TxnError::Aborted { cause: AbortCause::BatchFailed, .. }),
        "innocent error: {innocent_err:?}"
    );
    for p in 0..4 {
        let st = cluster.master_snapshot(&acct(p)).unwrap();
        assert_eq!(st.kv.get(&bal()).and_then(Value::as_int), Some(1000), "nothing applied");
    }

    // The failed batch must not wedge its actors' schedule chains.
    let retry = cluster
        .submit_pact(acct(0), "transfer", transfer_args(1, 100), transfer_spec(Granularity::ActorLevel, 0, 1))
        .await
        .unwrap();
    cluster.flush().unwrap();
    retry.wait().await.expect("next batch commits");
    let a = cluster.master_snapshot(&acct(0)).unwrap();
    assert_eq!(a.kv.get(&bal()).and_then(Value::as_int), Some(900));
    cluster.shutdown().await.unwrap();
}

/// Declaring more accesses than the method performs must not stall the
/// batch: the unused turns are released when the member's logic finishes.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn over_declared_accesses_release_cleanly() {
    let cluster = build(2, Granularity::ActorLevel);
    seed_balances(&cluster, 2, 1000).await;
    let h1 = cluster
        .submit_pact(
            acct(0),
            "transfer",
            transfer_args(1, 10),
            AccessSpec::new().actor(acct(0), 3).actor(acct(1), 2),
        )
        .await
        .unwrap();
    // A successor on both actors in the same batch: it can only run after
    // the over-declared member's turns are released.
    let h2 = cluster
        .submit_pact(acct(0), "transfer", transfer_args(1, 10), transfer_spec(Granularity::ActorLevel, 0, 1))
        .await
        .unwrap();
    cluster.flush().unwrap();
    h1.wait().await.expect("over-declared member commits");
    h2.wait().await.expect("successor commits");
    let a = cluster.master_snapshot(&acct(0)).unwrap();
    assert_eq!(a.kv.get(&bal()).and_then(Value::as_int), Some(980));
    cluster.shutdown().await.unwrap();
}

/// A declared actor the method never touches at all still releases.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn untouched_declared_actor_releases() {
    let cluster = build(3, Granularity::ActorLevel);
    seed_balances(&cluster, 3, 1000).await;
    let h1 = cluster
        .submit_pact(
            acct(0),
            "transfer",
            transfer_args(1, 10),
            AccessSpec::new().actor(acct(0), 1).actor(acct(1), 1).actor(acct(2), 1),
        )
        .await
        .unwrap();
    let h2 = cluster
        .submit_pact(acct(2), "deposit", Value::record([("amount", Value::Int(5))]), AccessSpec::new().actor(acct(2), 1))
        .await
        .unwrap();
    cluster.flush().unwrap();
    h1.wait().await.expect("member with an untouched actor commits");
    h2.wait().await.expect("successor on the untouched actor commits");
    let c = cluster.master_snapshot(&acct(2)).unwrap();
    assert_eq!(c.kv.get(&bal()).and_then(Value::as_int), Some(1005));
    cluster.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn invalid_specs_are_rejected_up_front() {
    let cluster = build(2, Granularity::ActorLevel);
    seed_balances(&cluster, 2, 1000).await;
    // Empty spec.
    let h = cluster.submit_pact(acct(0), "deposit", Value::Int(0), AccessSpec::new()).await.unwrap();
    assert!(matches!(h.wait().await, Err(TxnError::InvalidSpec(_))));
    // Root not declared.
    let h = cluster
        .submit_pact(acct(0), "deposit", Value::Int(0), AccessSpec::new().actor(acct(1), 1))
        .await
        .unwrap();
    assert!(matches!(h.wait().await, Err(TxnError::InvalidSpec(_))));
    // Unknown actor group.
    let h = cluster
        .submit_pact(
            ActorId::new("ghost", 0),
            "deposit",
            Value::Int(0),
            AccessSpec::new().actor(ActorId::new("ghost", 0), 1),
        )
        .await
        .unwrap();
    assert!(matches!(h.wait().await, Err(TxnError::InvalidSpec(_))));
    // Key-level spec under actor-level granularity.
    let h = cluster
        .submit_pact(
            acct(0),
            "deposit",
            Value::Int(0),
            AccessSpec::new().keys(acct(0), 1, [(bal(), AccessMode::ReadWrite)]),
        )
        .await
        .unwrap();
    assert!(matches!(h.wait().await, Err(TxnError::InvalidSpec(_))));
    cluster.shutdown().await.unwrap();
}

/// Two runs with identical submissions and batch boundaries produce the
/// same batch-schedule hash chain and the same final state hash.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn identical_runs_are_bitwise_deterministic() {
    async fn run_once(granularity: Granularity) -> (String, String, u64) {
        let partitions = 6u32;
        let cluster = build(partitions, granularity);
        seed_balances(&cluster, partitions, 500).await;
        let mut rng = StdRng::seed_from_u64(42);
        let mut handles = Vec::new();
        for _ in 0..120 {
            let src = rng.gen_range(0..partitions);
            let mut dst = rng.gen_range(0..partitions - 1);
            if dst >= src {
                dst += 1;
            }
            let amount = rng.gen_range(1..50i64);
            handles.push(
                cluster
                    .submit_pact(
                        acct(src),
                        "transfer",
                        transfer_args(dst, amount),
                        transfer_spec(granularity, src, dst),
                    )
                    .await
                    .unwrap(),
            );
            if rng.gen_bool(0.2) {
                cluster.flush().unwrap();
            }
        }
        cluster.flush().unwrap();
        for h in handles {
            h.wait().await.unwrap();
        }
        let trace = cluster.trace_summary();
        let hash = cluster.state_hash();
        cluster.shutdown().await.unwrap();
        (trace.schedule_chain, hash, trace.batches)
    }

    for granularity in [Granularity::ActorLevel, Granularity::KeyLevel] {
        let first = run_once(granularity).await;
        let second = run_once(granularity).await;
        assert_eq!(first, second, "determinism under {granularity:?}");
        assert!(first.2 >= 2, "the run should span several batches");
    }
}

/// Batches chain per actor: a second batch's members run strictly after
/// the first batch committed on shared actors.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn successive_batches_apply_in_order() {
    let cluster = build(2, Granularity::ActorLevel);
    seed_balances(&cluster, 2, 100).await;
    let mut handles = Vec::new();
    for _ in 0..5 {
        handles.push(
            cluster
                .submit_pact(acct(0), "transfer", transfer_args(1, 7), transfer_spec(Granularity::ActorLevel, 0, 1))
                .await
                .unwrap(),
        );
        cluster.flush().unwrap();
    }
    for h in handles {
        h.wait().await.expect("each single-member batch commits");
    }
    let a = cluster.master_snapshot(&acct(0)).unwrap();
    let b = cluster.master_snapshot(&acct(1)).unwrap();
    assert_eq!(a.kv.get(&bal()).and_then(Value::as_int), Some(100 - 35));
    assert_eq!(b.kv.get(&bal()).and_then(Value::as_int), Some(100 + 35));
    assert_eq!(cluster.trace_summary().batches, 5);
    assert_eq!(a.last_applied_bid, b.last_applied_bid, "both actors saw the same last batch");
    cluster.shutdown().await.unwrap();
}
