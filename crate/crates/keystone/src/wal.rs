//! Per-actor append-only log files and replay.
//!
//! A [`LogStore`] owns one directory per run. Every actor writes to its own
//! file (`<group>_<partition>.log`), so appends from different actors never
//! contend and replay is a single sequential scan. Three modes:
//!
//! * `Incremental` — each committed batch/transaction appends only its
//!   operations for that actor.
//! * `Snapshot` — each record carries the actor's entire key/value and
//!   dependency image instead.
//! * `Disabled` — appends are free no-ops, for baseline measurements.
//!
//! Both record kinds share the framing in [`crate::wire`] and are
//! self-describing on read: an op-count of zero with a non-empty body is a
//! snapshot (a genuine empty incremental record has an empty body). A
//! `manifest.json` written by [`LogStore::seal`] lists the files, modes and
//! final watermarks for tooling.
//!
//! Replay is strict: frames must pass CRC, batch ids per file must strictly
//! increase, and operations must make sense against the reconstructed
//! state (no deleting absent keys). A damaged tail yields the state up to
//! the last good frame plus the error, mirroring how a crashed process
//! would recover.

use crate::error::WalError;
use crate::state::{apply_committed, ActorState, ApplyMarker, LoggedOp, OpLogEntry};
use crate::types::ActorId;
use crate::wire::{
    encode_incremental, encode_snapshot, Frame, FrameReadError, FrameReader, SnapshotContent,
    WireOp,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogMode {
    Incremental,
    Snapshot,
    Disabled,
}

/// Durability knob. `Batched` flushes every record to the OS but fsyncs
/// only every [`SYNC_EVERY`] records; `Never` defers everything to seal.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushPolicy {
    PerRecord,
    Batched,
    Never,
}

const SYNC_EVERY: u32 = 32;

/// Strips before-images off a transaction log segment for the wire.
pub fn to_wire_ops(entries: &[OpLogEntry]) -> Vec<WireOp> {
    entries
        .iter()
        .map(|e| match &e.op {
            LoggedOp::Put { key, after, .. } => {
                WireOp::Put { key: key.clone(), value: after.clone() }
            }
            LoggedOp::Delete { key, .. } => WireOp::Delete { key: key.clone() },
            LoggedOp::RegisterDep { key, dep } => {
                WireOp::RegisterDep { key: key.clone(), dep: dep.clone() }
            }
            LoggedOp::DeregisterDep { key, dep } => {
                WireOp::DeregisterDep { key: key.clone(), dep: dep.clone() }
            }
        })
        .collect()
}

/// Full image of a master state, for snapshot records and state dumps.
pub fn snapshot_of(state: &ActorState) -> SnapshotContent {
    SnapshotContent { kv: state.kv.clone(), deps: state.deps.clone() }
}

struct ActorLog {
    writer: BufWriter<File>,
    bytes: u64,
    records: u64,
    last_bid: u64,
    unsynced: u32,
}

/// Append side of the log. Shared by every actor executor; per-actor
/// streams take their own lock so writers on different actors proceed
/// independently.
pub struct LogStore {
    dir: PathBuf,
    mode: LogMode,
    flush: FlushPolicy,
    logs: Mutex<HashMap<ActorId, Arc<Mutex<ActorLog>>>>,
    total_bytes: AtomicU64,
    total_records: AtomicU64,
}

pub fn log_file_name(actor: &ActorId) -> String {
    format!("{}_{}.log", actor.group, actor.partition)
}

impl LogStore {
    pub fn create(dir: impl Into<PathBuf>, mode: LogMode, flush: FlushPolicy) -> Result<Arc<Self>, WalError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Arc::new(LogStore {
            dir,
            mode,
            flush,
            logs: Mutex::new(HashMap::new()),
            total_bytes: AtomicU64::new(0),
            total_records: AtomicU64::new(0),
        }))
    }

    pub fn mode(&self) -> LogMode {
        self.mode
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Total bytes appended so far, across all actors.
    pub fn bytes_written(&self) -> u64 {
        self.total_bytes.load(Ordering::Relaxed)
    }

    /// Total records appended so far, across all actors.
    pub fn records_written(&self) -> u64 {
        self.total_records.load(Ordering::Relaxed)
    }

    fn actor_log(&self, actor: &ActorId) -> Result<Arc<Mutex<ActorLog>>, WalError> {
        let mut logs = self.logs.lock();
        if let Some(log) = logs.get(actor) {
            return Ok(log.clone());
        }
        let path = self.dir.join(log_file_name(actor));
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let log = Arc::new(Mutex::new(ActorLog {
            writer: BufWriter::new(file),
            bytes: 0,
            records: 0,
            last_bid: 0,
            unsynced: 0,
        }));
        logs.insert(actor.clone(), log.clone());
        Ok(log)
    }

    /// Appends one record for `actor`, choosing the record kind by mode:
    /// the operations in incremental mode, the full image (built lazily via
    /// `snapshot`) in snapshot mode, nothing when disabled. Returns the
    /// exact byte count written.
    pub fn append(
        &self,
        actor: &ActorId,
        tid: u64,
        bid: u64,
        ops: &[WireOp],
        snapshot: impl FnOnce() -> SnapshotContent,
    ) -> Result<u64, WalError> {
        let bytes = match self.mode {
            LogMode::Disabled => return Ok(0),
            LogMode::Incremental => encode_incremental(tid, bid, ops),
            LogMode::Snapshot => encode_snapshot(tid, bid, &snapshot()),
        };
        self.write_record(actor, bid, bytes)
    }

    /// Appends a full-image record regardless of mode (unless disabled).
    /// Used to seed baseline state so that replay of an incremental stream
    /// starts from the same picture the live actors started from.
    pub fn append_snapshot(
        &self,
        actor: &ActorId,
        tid: u64,
        bid: u64,
        content: &SnapshotContent,
    ) -> Result<u64, WalError> {
        if self.mode == LogMode::Disabled {
            return Ok(0);
        }
        self.write_record(actor, bid, encode_snapshot(tid, bid, content))
    }

    fn write_record(&self, actor: &ActorId, bid: u64, bytes: Vec<u8>) -> Result<u64, WalError> {
        let log = self.actor_log(actor)?;
        let mut log = log.lock();
        log.writer.write_all(&bytes)?;
        match self.flush {
            FlushPolicy::PerRecord => {
                log.writer.flush()?;
                log.writer.get_ref().sync_data()?;
            }
            FlushPolicy::Batched => {
                log.writer.flush()?;
                log.unsynced += 1;
                if log.unsynced >= SYNC_EVERY {
                    log.writer.get_ref().sync_data()?;
                    log.unsynced = 0;
                }
            }
            FlushPolicy::Never => {}
        }
        log.bytes += bytes.len() as u64;
        log.records += 1;
        log.last_bid = log.last_bid.max(bid);
        self.total_bytes.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        self.total_records.fetch_add(1, Ordering::Relaxed);
        Ok(bytes.len() as u64)
    }

    /// Flushes and fsyncs every stream and writes `manifest.json`.
    pub fn seal(&self) -> Result<Manifest, WalError> {
        let logs = self.logs.lock();
        let mut entries = Vec::new();
        for (actor, log) in logs.iter() {
            let mut log = log.lock();
            log.writer.flush()?;
            log.writer.get_ref().sync_data()?;
            entries.push(ManifestEntry {
                group: actor.group.clone(),
                partition: actor.partition,
                file: log_file_name(actor),
                records: log.records,
                bytes: log.bytes,
                last_bid: log.last_bid,
            });
        }
        entries.sort_by(|a, b| (&a.group, a.partition).cmp(&(&b.group, b.partition)));
        let manifest = Manifest { mode: self.mode, actors: entries };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| WalError::Manifest(e.to_string()))?;
        let path = self.dir.join(MANIFEST_FILE);
        let mut f = File::create(&path)?;
        f.write_all(json.as_bytes())?;
        f.sync_data()?;
        Ok(manifest)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: LogMode,
    pub actors: Vec<ManifestEntry>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub group: String,
    pub partition: u32,
    pub file: String,
    pub records: u64,
    pub bytes: u64,
    pub last_bid: u64,
}

impl ManifestEntry {
    pub fn actor(&self) -> ActorId {
        ActorId::new(&self.group, self.partition)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, WalError> {
    let path = dir.join(MANIFEST_FILE);
    let data = fs::read_to_string(&path)?;
    serde_json::from_str(&data).map_err(|e| WalError::Manifest(e.to_string()))
}

/// Header facts about one replayed record.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ReplayedFrame {
    pub tid: u64,
    pub bid: u64,
    pub op_count: u16,
    pub snapshot: bool,
}

/// Result of replaying one actor's stream. `error` carries the first
/// defect encountered; `state` is everything applied before it.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub state: ActorState,
    pub frames: Vec<ReplayedFrame>,
    pub error: Option<WalError>,
}

impl ReplayOutcome {
    pub fn is_clean(&self) -> bool {
        self.error.is_none()
    }
}

fn frame_is_snapshot(frame: &Frame) -> bool {
    frame.op_count == 0 && !frame.body.is_empty()
}

fn to_logged_ops(state: &ActorState, ops: Vec<WireOp>) -> Result<Vec<OpLogEntry>, String> {
    // Before-images are not on the wire; rebuild them from the replay
    // state so the shared apply path can be reused. A scratch map covers
    // ops that read back earlier writes in the same record.
    let mut scratch: HashMap<crate::types::Key, Option<crate::value::Value>> = HashMap::new();
    let mut out = Vec::with_capacity(ops.len());
    for (i, op) in ops.into_iter().enumerate() {
        let seq = i as u32;
        let logged = match op {
            WireOp::Put { key, value } => {
                let before = scratch
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| state.kv.get(&key).cloned());
                scratch.insert(key.clone(), Some(value.clone()));
                LoggedOp::Put { key, before, after: value }
            }
            WireOp::Delete { key } => {
                let before = scratch
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| state.kv.get(&key).cloned())
                    .ok_or_else(|| format!("delete of absent key {key}"))?;
                scratch.insert(key.clone(), None);
                LoggedOp::Delete { key, before }
            }
            WireOp::RegisterDep { key, dep } => LoggedOp::RegisterDep { key, dep },
            WireOp::DeregisterDep { key, dep } => LoggedOp::DeregisterDep { key, dep },
        };
        out.push(OpLogEntry { seq, op: logged });
    }
    Ok(out)
}

/// Replays one actor's log file from the beginning. Only failure to open
/// the file is a hard error; anything wrong inside the stream is reported
/// through [`ReplayOutcome::error`] alongside the salvaged state.
pub fn replay_file(path: &Path) -> Result<ReplayOutcome, WalError> {
    let file_label = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let file = File::open(path)?;
    let mut reader = FrameReader::new(BufReader::new(file));

    let mut outcome =
        ReplayOutcome { state: ActorState::new(), frames: Vec::new(), error: None };

    loop {
        let frame = match reader.next_frame() {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(FrameReadError::Io(e)) => {
                outcome.error = Some(WalError::Io(e));
                break;
            }
            Err(FrameReadError::Corrupt { offset, reason }) => {
                outcome.error = Some(WalError::CorruptRecord {
                    file: file_label.clone(),
                    offset,
                    reason,
                });
                break;
            }
        };

        let corrupt = |reason: String| WalError::CorruptRecord {
            file: file_label.clone(),
            offset: frame.offset,
            reason,
        };

        if frame.bid > 0 && frame.bid <= outcome.state.last_applied_bid {
            outcome.error = Some(WalError::OrderViolation {
                file: file_label.clone(),
                bid: frame.bid,
                prev: outcome.state.last_applied_bid,
            });
            break;
        }

        let summary = ReplayedFrame {
            tid: frame.tid,
            bid: frame.bid,
            op_count: frame.op_count,
            snapshot: frame_is_snapshot(&frame),
        };

        if summary.snapshot {
            match frame.snapshot() {
                Ok(content) => {
                    outcome.state.kv = content.kv;
                    outcome.state.deps = content.deps;
                    outcome.state.last_applied_bid =
                        outcome.state.last_applied_bid.max(frame.bid);
                    outcome.state.last_applied_tid = frame.tid;
                }
                Err(e) => {
                    outcome.error = Some(corrupt(e.reason));
                    break;
                }
            }
        } else {
            let ops = match frame.ops() {
                Ok(ops) => ops,
                Err(e) => {
                    outcome.error = Some(corrupt(e.reason));
                    break;
                }
            };
            let entries = match to_logged_ops(&outcome.state, ops) {
                Ok(entries) => entries,
                Err(reason) => {
                    outcome.error = Some(corrupt(reason));
                    break;
                }
            };
            let marker = if frame.bid > 0 {
                ApplyMarker::batch(frame.bid, frame.tid)
            } else {
                ApplyMarker::act(frame.tid)
            };
            if let Err(e) = apply_committed(&mut outcome.state, marker, &entries) {
                outcome.error = Some(corrupt(format!("apply failed: {e}")));
                break;
            }
        }
        outcome.frames.push(summary);
    }
    Ok(outcome)
}

/// Replays every actor listed in a run directory's manifest.
pub fn replay_dir(dir: &Path) -> Result<BTreeMap<ActorId, ReplayOutcome>, WalError> {
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for entry in &manifest.actors {
        let outcome = replay_file(&dir.join(&entry.file))?;
        out.insert(entry.actor(), outcome);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deps::DependencyRecord;
    use crate::types::Key;
    use crate::value::Value;

    fn aid(p: u32) -> ActorId {
        ActorId::new("acct", p)
    }

    fn k(id: &str) -> Key {
        Key::new("k", id)
    }

    fn put(id: &str, v: i64) -> WireOp {
        WireOp::Put { key: k(id), value: Value::Int(v) }
    }

    #[test]
    fn incremental_append_and_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Incremental, FlushPolicy::Batched).unwrap();

        store.append(&aid(0), 3, 1, &[put("a", 1), put("b", 2)], SnapshotContent::default)
            .unwrap();
        store.append(&aid(0), 7, 4, &[put("a", 10), WireOp::Delete { key: k("b") }],
            SnapshotContent::default)
            .unwrap();
        store.append(&aid(1), 5, 2, &[put("z", -1)], SnapshotContent::default).unwrap();
        store.seal().unwrap();

        let zero = replay_file(&dir.path().join("acct_0.log")).unwrap();
        assert!(zero.is_clean());
        assert_eq!(zero.frames.len(), 2);
        assert_eq!(zero.state.kv.get(&k("a")), Some(&Value::Int(10)));
        assert_eq!(zero.state.kv.get(&k("b")), None);
        assert_eq!(zero.state.last_applied_bid, 4);
        assert_eq!(zero.state.last_applied_tid, 7);

        let one = replay_file(&dir.path().join("acct_1.log")).unwrap();
        assert_eq!(one.state.kv.get(&k("z")), Some(&Value::Int(-1)));
    }

    #[test]
    fn snapshot_mode_replay_takes_last_image() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Snapshot, FlushPolicy::Never).unwrap();

        let image = |n: i64| {
            let mut c = SnapshotContent::default();
            for i in 0..n {
                c.kv.insert(k(&i.to_string()), Value::Int(i * 100));
            }
            c
        };
        store.append(&aid(0), 1, 1, &[], || image(2)).unwrap();
        store.append(&aid(0), 4, 2, &[], || image(3)).unwrap();
        store.seal().unwrap();

        let out = replay_file(&dir.path().join("acct_0.log")).unwrap();
        assert!(out.is_clean());
        assert!(out.frames.iter().all(|f| f.snapshot));
        assert_eq!(out.state.kv.len(), 3);
        assert_eq!(out.state.last_applied_bid, 2);
        assert_eq!(out.state.last_applied_tid, 4);
    }

    #[test]
    fn snapshot_baseline_then_incremental_tail() {
        // A stream may mix kinds: image first, increments after.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acct_0.log");
        let mut f = File::create(&path).unwrap();
        let mut image = SnapshotContent::default();
        image.kv.insert(k("a"), Value::Int(1));
        image.kv.insert(k("b"), Value::Int(2));
        f.write_all(&crate::wire::encode_snapshot(9, 3, &image)).unwrap();
        for (tid, bid) in [(10u64, 4u64), (12, 5), (14, 6), (17, 7)] {
            f.write_all(&crate::wire::encode_incremental(
                tid,
                bid,
                &[put("a", tid as i64)],
            ))
            .unwrap();
        }
        drop(f);

        let out = replay_file(&path).unwrap();
        assert!(out.is_clean());
        assert_eq!(out.frames.len(), 5);
        assert_eq!(out.state.kv.get(&k("a")), Some(&Value::Int(17)));
        assert_eq!(out.state.kv.get(&k("b")), Some(&Value::Int(2)));
        assert_eq!(out.state.last_applied_bid, 7);
    }

    #[test]
    fn empty_incremental_record_is_not_mistaken_for_a_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Incremental, FlushPolicy::Never).unwrap();
        store.append(&aid(0), 2, 1, &[put("a", 1)], SnapshotContent::default).unwrap();
        // Read-only participation: a record with no operations.
        store.append(&aid(0), 5, 2, &[], SnapshotContent::default).unwrap();
        store.seal().unwrap();

        let out = replay_file(&dir.path().join("acct_0.log")).unwrap();
        assert!(out.is_clean());
        assert_eq!(out.frames.len(), 2);
        assert!(!out.frames[1].snapshot);
        assert_eq!(out.state.kv.get(&k("a")), Some(&Value::Int(1)), "state untouched");
        assert_eq!(out.state.last_applied_bid, 2, "watermark still advances");
    }

    #[test]
    fn torn_tail_salvages_prefix_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Incremental, FlushPolicy::Never).unwrap();
        store.append(&aid(0), 1, 1, &[put("a", 1)], SnapshotContent::default).unwrap();
        store.append(&aid(0), 2, 2, &[put("a", 2)], SnapshotContent::default).unwrap();
        store.append(&aid(0), 3, 3, &[put("a", 3)], SnapshotContent::default).unwrap();
        store.seal().unwrap();

        let path = dir.path().join("acct_0.log");
        let len = fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 5).unwrap();

        let out = replay_file(&path).unwrap();
        assert_eq!(out.frames.len(), 2);
        assert_eq!(out.state.kv.get(&k("a")), Some(&Value::Int(2)));
        assert!(matches!(out.error, Some(WalError::CorruptRecord { .. })));
    }

    #[test]
    fn regressing_batch_ids_are_an_order_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acct_0.log");
        let mut f = File::create(&path).unwrap();
        f.write_all(&crate::wire::encode_incremental(9, 5, &[put("a", 1)])).unwrap();
        f.write_all(&crate::wire::encode_incremental(11, 4, &[put("a", 2)])).unwrap();
        drop(f);

        let out = replay_file(&path).unwrap();
        assert_eq!(out.frames.len(), 1);
        assert_eq!(out.state.kv.get(&k("a")), Some(&Value::Int(1)));
        match out.error {
            Some(WalError::OrderViolation { bid, prev, .. }) => {
                assert_eq!((bid, prev), (4, 5));
            }
            other => panic!("expected order violation, got {other:?}"),
        }
    }

    #[test]
    fn deleting_an_absent_key_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acct_0.log");
        let mut f = File::create(&path).unwrap();
        f.write_all(&crate::wire::encode_incremental(1, 1, &[WireOp::Delete { key: k("ghost") }]))
            .unwrap();
        drop(f);

        let out = replay_file(&path).unwrap();
        assert!(out.frames.is_empty());
        match out.error {
            Some(WalError::CorruptRecord { reason, .. }) => {
                assert!(reason.contains("absent key"));
            }
            other => panic!("expected corrupt record, got {other:?}"),
        }
    }

    #[test]
    fn byte_accounting_matches_file_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Incremental, FlushPolicy::PerRecord).unwrap();
        let mut reported = 0;
        reported += store.append(&aid(0), 1, 1, &[put("a", 1)], SnapshotContent::default).unwrap();
        reported += store.append(&aid(1), 2, 1, &[put("b", 2)], SnapshotContent::default).unwrap();
        reported += store.append(&aid(0), 3, 2, &[put("a", 3)], SnapshotContent::default).unwrap();
        let manifest = store.seal().unwrap();

        let on_disk: u64 = manifest
            .actors
            .iter()
            .map(|e| fs::metadata(dir.path().join(&e.file)).unwrap().len())
            .sum();
        assert_eq!(reported, on_disk);
        assert_eq!(store.bytes_written(), on_disk);
        assert_eq!(store.records_written(), 3);
        assert_eq!(manifest.actors.iter().map(|e| e.records).sum::<u64>(), 3);
    }

    #[test]
    fn incremental_records_undercut_snapshots_when_ops_touch_few_keys() {
        // Same 20-op batch, both encodings, against a 200-key actor.
        let mut state = ActorState::new();
        for i in 0..200 {
            state.kv.insert(k(&format!("key{i}")), Value::Int(i));
        }
        let ops: Vec<WireOp> = (0..20).map(|i| put(&format!("key{i}"), i + 1)).collect();
        let incremental = encode_incremental(1, 1, &ops).len();
        let snapshot = encode_snapshot(1, 1, &snapshot_of(&state)).len();
        assert!(
            incremental < snapshot,
            "incremental {incremental} >= snapshot {snapshot}"
        );
    }

    #[test]
    fn disabled_mode_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Disabled, FlushPolicy::PerRecord).unwrap();
        let n = store.append(&aid(0), 1, 1, &[put("a", 1)], SnapshotContent::default).unwrap();
        assert_eq!(n, 0);
        assert_eq!(store.bytes_written(), 0);
        let manifest = store.seal().unwrap();
        assert!(manifest.actors.is_empty());
        assert!(!dir.path().join("acct_0.log").exists());
    }

    #[test]
    fn manifest_round_trips_and_drives_directory_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Incremental, FlushPolicy::Batched).unwrap();
        store.append(&aid(1), 1, 1, &[put("a", 1)], SnapshotContent::default).unwrap();
        store.append(&aid(0), 2, 2, &[put("b", 2)], SnapshotContent::default).unwrap();
        let sealed = store.seal().unwrap();

        let read_back = read_manifest(dir.path()).unwrap();
        assert_eq!(read_back, sealed);
        assert_eq!(read_back.actors.len(), 2);
        // Sorted by (group, partition).
        assert_eq!(read_back.actors[0].partition, 0);

        let all = replay_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert!(all.values().all(|o| o.is_clean()));
        assert_eq!(all[&aid(1)].state.kv.get(&k("a")), Some(&Value::Int(1)));
    }

    #[test]
    fn dependency_records_survive_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store =
            LogStore::create(dir.path(), LogMode::Incremental, FlushPolicy::Never).unwrap();
        let dep = DependencyRecord::update(
            aid(0),
            k("leader"),
            ActorId::new("cart", 1),
            Key::new("i", "7"),
            "replicate",
        );
        store.append(
            &aid(0),
            1,
            1,
            &[put("leader", 5), WireOp::RegisterDep { key: k("leader"), dep: dep.clone() }],
            SnapshotContent::default,
        )
        .unwrap();
        store.seal().unwrap();

        let out = replay_file(&dir.path().join("acct_0.log")).unwrap();
        assert!(out.is_clean());
        assert_eq!(out.state.deps.get(&k("leader")).unwrap(), &vec![dep]);
    }
}
