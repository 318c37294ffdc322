//! Binary framing for log records and state snapshots.
//!
//! A frame is `u32 payload-length | payload | u32 crc32(payload)`, with the
//! payload laid out as `u64 tid | u64 bid | u16 op-count | body`, all fields
//! little-endian. Incremental records put `op-count` encoded operations in
//! the body; snapshot records use `op-count = 0` and carry a full key/value
//! + dependency image instead (the log manifest says which mode a stream
//! was written in). ACT records use `bid = 0`.
//!
//! Values serialize as tagged unions: one tag byte followed by the payload
//! (`1` int, `2` decimal, `3` text, `4` record). Strings are `u32` length +
//! UTF-8 bytes. Decoding is strict — trailing bytes, bad tags, overlong
//! lengths, and CRC mismatches are errors, never best-effort guesses.

use crate::deps::{DepType, DependencyRecord};
use crate::types::{ActorId, Key};
use crate::value::{Decimal, Value};
use std::collections::BTreeMap;
use std::io::Read;

/// Frame overhead on top of the payload: length prefix + trailing CRC.
pub const FRAME_OVERHEAD: usize = 8;
/// Payload header: tid + bid + op-count.
pub const PAYLOAD_HEADER: usize = 8 + 8 + 2;
/// Decode-side guard against pathological nesting in corrupt input.
const MAX_VALUE_DEPTH: u32 = 32;

const TAG_INT: u8 = 1;
const TAG_DECIMAL: u8 = 2;
const TAG_TEXT: u8 = 3;
const TAG_RECORD: u8 = 4;

const OP_PUT: u8 = 1;
const OP_DELETE: u8 = 2;
const OP_REGISTER: u8 = 3;
const OP_DEREGISTER: u8 = 4;

const DEP_DELETE: u8 = 1;
const DEP_UPDATE: u8 = 2;

/// A log-visible state operation: what replay needs, nothing more.
/// Before-images stay in the in-memory transaction log — shipping them
/// would roughly double incremental record sizes for no replay benefit.
#[derive(Clone, PartialEq, Debug)]
pub enum WireOp {
    Put { key: Key, value: Value },
    Delete { key: Key },
    /// Attach `dep` to the record list of local key `key`.
    RegisterDep { key: Key, dep: DependencyRecord },
    /// Remove `dep` from the record list of local key `key`.
    DeregisterDep { key: Key, dep: DependencyRecord },
}

/// Full actor image carried by a snapshot record.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct SnapshotContent {
    pub kv: BTreeMap<Key, Value>,
    pub deps: BTreeMap<Key, Vec<DependencyRecord>>,
}

#[derive(thiserror::Error, Debug, PartialEq, Eq)]
#[error("{reason}")]
pub struct DecodeError {
    pub reason: String,
}

fn bad(reason: impl Into<String>) -> DecodeError {
    DecodeError { reason: reason.into() }
}

// ---------------------------------------------------------------- encoding

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_value(buf: &mut Vec<u8>, v: &Value) {
    match v {
        Value::Int(i) => {
            buf.push(TAG_INT);
            buf.extend_from_slice(&i.to_le_bytes());
        }
        Value::Decimal(d) => {
            buf.push(TAG_DECIMAL);
            buf.extend_from_slice(&d.units().to_le_bytes());
        }
        Value::Text(s) => {
            buf.push(TAG_TEXT);
            put_str(buf, s);
        }
        Value::Record(fields) => {
            buf.push(TAG_RECORD);
            buf.extend_from_slice(&(fields.len() as u16).to_le_bytes());
            for (name, val) in fields {
                put_str(buf, name);
                encode_value(buf, val);
            }
        }
    }
}

pub fn encode_key(buf: &mut Vec<u8>, k: &Key) {
    put_str(buf, &k.namespace);
    put_str(buf, &k.id);
}

pub fn encode_actor(buf: &mut Vec<u8>, a: &ActorId) {
    put_str(buf, &a.group);
    buf.extend_from_slice(&a.partition.to_le_bytes());
}

pub fn encode_dep(buf: &mut Vec<u8>, d: &DependencyRecord) {
    buf.push(match d.dep_type {
        DepType::Delete => DEP_DELETE,
        DepType::Update => DEP_UPDATE,
    });
    encode_actor(buf, &d.leader_actor);
    encode_key(buf, &d.leader_key);
    encode_actor(buf, &d.follower_actor);
    encode_key(buf, &d.follower_key);
    match &d.function_id {
        Some(id) => {
            buf.push(1);
            put_str(buf, id);
        }
        None => buf.push(0),
    }
}

pub fn encode_op(buf: &mut Vec<u8>, op: &WireOp) {
    match op {
        WireOp::Put { key, value } => {
            buf.push(OP_PUT);
            encode_key(buf, key);
            encode_value(buf, value);
        }
        WireOp::Delete { key } => {
            buf.push(OP_DELETE);
            encode_key(buf, key);
        }
        WireOp::RegisterDep { key, dep } => {
            buf.push(OP_REGISTER);
            encode_key(buf, key);
            encode_dep(buf, dep);
        }
        WireOp::DeregisterDep { key, dep } => {
            buf.push(OP_DEREGISTER);
            encode_key(buf, key);
            encode_dep(buf, dep);
        }
    }
}

fn frame(payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Complete frame for an incremental record.
pub fn encode_incremental(tid: u64, bid: u64, ops: &[WireOp]) -> Vec<u8> {
    assert!(ops.len() <= u16::MAX as usize, "record exceeds op-count field");
    let mut payload = Vec::with_capacity(PAYLOAD_HEADER + ops.len() * 24);
    payload.extend_from_slice(&tid.to_le_bytes());
    payload.extend_from_slice(&bid.to_le_bytes());
    payload.extend_from_slice(&(ops.len() as u16).to_le_bytes());
    for op in ops {
        encode_op(&mut payload, op);
    }
    frame(payload)
}

/// Complete frame for a snapshot record (`op-count = 0`, body = image).
pub fn encode_snapshot(tid: u64, bid: u64, content: &SnapshotContent) -> Vec<u8> {
    let mut payload = Vec::with_capacity(PAYLOAD_HEADER + 8);
    payload.extend_from_slice(&tid.to_le_bytes());
    payload.extend_from_slice(&bid.to_le_bytes());
    payload.extend_from_slice(&0u16.to_le_bytes());
    payload.extend_from_slice(&(content.kv.len() as u32).to_le_bytes());
    for (k, v) in &content.kv {
        encode_key(&mut payload, k);
        encode_value(&mut payload, v);
    }
    payload.extend_from_slice(&(content.deps.len() as u32).to_le_bytes());
    for (k, records) in &content.deps {
        encode_key(&mut payload, k);
        payload.extend_from_slice(&(records.len() as u16).to_le_bytes());
        for r in records {
            encode_dep(&mut payload, r);
        }
    }
    frame(payload)
}

// ---------------------------------------------------------------- decoding

/// Strict little-endian reader over one payload.
pub struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(bad(format!("need {n} bytes, have {}", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let len = self.u32()? as usize;
        if len > self.remaining() {
            return Err(bad(format!("string length {len} exceeds remaining bytes")));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad("string is not valid UTF-8"))
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes after record", self.remaining())));
        }
        Ok(())
    }
}

fn decode_value_at(cur: &mut Cursor<'_>, depth: u32) -> Result<Value, DecodeError> {
    if depth > MAX_VALUE_DEPTH {
        return Err(bad("value nesting too deep"));
    }
    match cur.u8()? {
        TAG_INT => Ok(Value::Int(cur.i64()?)),
        TAG_DECIMAL => Ok(Value::Decimal(Decimal::from_units(cur.i64()?))),
        TAG_TEXT => Ok(Value::Text(cur.string()?)),
        TAG_RECORD => {
            let n = cur.u16()?;
            let mut fields = BTreeMap::new();
            for _ in 0..n {
                let name = cur.string()?;
                let val = decode_value_at(cur, depth + 1)?;
                fields.insert(name, val);
            }
            Ok(Value::Record(fields))
        }
        t => Err(bad(format!("unknown value tag {t}"))),
    }
}

pub fn decode_value(cur: &mut Cursor<'_>) -> Result<Value, DecodeError> {
    decode_value_at(cur, 0)
}

pub fn decode_key(cur: &mut Cursor<'_>) -> Result<Key, DecodeError> {
    let namespace = cur.string()?;
    let id = cur.string()?;
    Ok(Key { namespace, id })
}

pub fn decode_actor(cur: &mut Cursor<'_>) -> Result<ActorId, DecodeError> {
    let group = cur.string()?;
    let partition = cur.u32()?;
    Ok(ActorId { group, partition })
}

pub fn decode_dep(cur: &mut Cursor<'_>) -> Result<DependencyRecord, DecodeError> {
    let dep_type = match cur.u8()? {
        DEP_DELETE => DepType::Delete,
        DEP_UPDATE => DepType::Update,
        t => return Err(bad(format!("unknown dependency type {t}"))),
    };
    let leader_actor = decode_actor(cur)?;
    let leader_key = decode_key(cur)?;
    let follower_actor = decode_actor(cur)?;
    let follower_key = decode_key(cur)?;
    let function_id = match cur.u8()? {
        0 => None,
        1 => Some(cur.string()?),
        t => return Err(bad(format!("bad function-id presence byte {t}"))),
    };
    Ok(DependencyRecord {
        dep_type,
        leader_actor,
        leader_key,
        follower_actor,
        follower_key,
        function_id,
    })
}

pub fn decode_op(cur: &mut Cursor<'_>) -> Result<WireOp, DecodeError> {
    match cur.u8()? {
        OP_PUT => {
            let key = decode_key(cur)?;
            let value = decode_value(cur)?;
            Ok(WireOp::Put { key, value })
        }
        OP_DELETE => Ok(WireOp::Delete { key: decode_key(cur)? }),
        OP_REGISTER => {
            let key = decode_key(cur)?;
            let dep = decode_dep(cur)?;
            Ok(WireOp::RegisterDep { key, dep })
        }
        OP_DEREGISTER => {
            let key = decode_key(cur)?;
            let dep = decode_dep(cur)?;
            Ok(WireOp::DeregisterDep { key, dep })
        }
        t => Err(bad(format!("unknown op tag {t}"))),
    }
}

/// CRC-validated frame payload, header split out, body still encoded.
#[derive(Clone, PartialEq, Debug)]
pub struct Frame {
    /// Byte offset of the frame's length prefix within its stream.
    pub offset: u64,
    pub tid: u64,
    pub bid: u64,
    pub op_count: u16,
    pub body: Vec<u8>,
}

impl Frame {
    /// Interprets the body as an incremental record.
    pub fn ops(&self) -> Result<Vec<WireOp>, DecodeError> {
        let mut cur = Cursor::new(&self.body);
        let mut ops = Vec::with_capacity(self.op_count as usize);
        for _ in 0..self.op_count {
            ops.push(decode_op(&mut cur)?);
        }
        cur.finish()?;
        Ok(ops)
    }

    /// Interprets the body as a snapshot image.
    pub fn snapshot(&self) -> Result<SnapshotContent, DecodeError> {
        if self.op_count != 0 {
            return Err(bad("snapshot record with nonzero op-count"));
        }
        let mut cur = Cursor::new(&self.body);
        let mut content = SnapshotContent::default();
        let kv_count = cur.u32()?;
        for _ in 0..kv_count {
            let k = decode_key(&mut cur)?;
            let v = decode_value(&mut cur)?;
            content.kv.insert(k, v);
        }
        let dep_count = cur.u32()?;
        for _ in 0..dep_count {
            let k = decode_key(&mut cur)?;
            let n = cur.u16()?;
            let mut records = Vec::with_capacity(n as usize);
            for _ in 0..n {
                records.push(decode_dep(&mut cur)?);
            }
            content.deps.insert(k, records);
        }
        cur.finish()?;
        Ok(content)
    }
}

#[derive(thiserror::Error, Debug)]
pub enum FrameReadError {
    #[error("io error reading frame: {0}")]
    Io(#[from] std::io::Error),
    /// Truncated or damaged frame; `offset` points at its length prefix.
    #[error("corrupt frame at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

/// Iterates frames off a byte stream, stopping cleanly at EOF and
/// reporting a torn or damaged tail as `Corrupt` with its offset.
pub struct FrameReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, offset: 0 }
    }

    fn read_exact_or_eof(&mut self, buf: &mut [u8]) -> Result<usize, std::io::Error> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(filled)
    }

    /// `Ok(None)` on a clean end-of-stream at a frame boundary.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameReadError> {
        let start = self.offset;
        let corrupt = |reason: &str| FrameReadError::Corrupt {
            offset: start,
            reason: reason.to_string(),
        };

        let mut len_buf = [0u8; 4];
        match self.read_exact_or_eof(&mut len_buf)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(corrupt("truncated length prefix")),
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        if len < PAYLOAD_HEADER {
            return Err(corrupt("payload shorter than record header"));
        }

        let mut payload = vec![0u8; len];
        if self.read_exact_or_eof(&mut payload)? != len {
            return Err(corrupt("truncated payload"));
        }
        let mut crc_buf = [0u8; 4];
        if self.read_exact_or_eof(&mut crc_buf)? != 4 {
            return Err(corrupt("truncated checksum"));
        }
        if crc32fast::hash(&payload) != u32::from_le_bytes(crc_buf) {
            return Err(corrupt("checksum mismatch"));
        }

        self.offset += (4 + len + 4) as u64;
        let mut cur = Cursor::new(&payload);
        let tid = cur.u64().expect("length checked");
        let bid = cur.u64().expect("length checked");
        let op_count = cur.u16().expect("length checked");
        let body = payload.split_off(PAYLOAD_HEADER);
        Ok(Some(Frame { offset: start, tid, bid, op_count, body }))
    }
}
