//! Identifiers and per-transaction context shared across the runtime.

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// A key within one actor's state: a namespace plus an id, e.g.
/// `acct/1042` or `item/77`. Keys are unique per actor and ordered
/// lexicographically, which gives master state and snapshots a canonical
/// iteration order.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Key {
    pub namespace: String,
    pub id: String,
}

impl Key {
    pub fn new(namespace: impl Into<String>, id: impl Into<String>) -> Self {
        Key {
            namespace: namespace.into(),
            id: id.into(),
        }
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.id)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.id)
    }
}

impl FromStr for Key {
    type Err = String;

    /// Parses `namespace/id`; the id may itself contain slashes.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (namespace, id) =
            s.split_once('/').ok_or_else(|| format!("key `{s}` missing `/`"))?;
        if namespace.is_empty() || id.is_empty() {
            return Err(format!("key `{s}` has an empty part"));
        }
        Ok(Key::new(namespace, id))
    }
}

// Keys serialize as their display form so they can act as JSON map keys.
impl Serialize for Key {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Globally unique actor identity: a group (actor type) and a partition
/// index within the group. The derived order (group, then partition) is the
/// total order used wherever actors must be visited deterministically.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActorId {
    pub group: String,
    pub partition: u32,
}

impl ActorId {
    pub fn new(group: impl Into<String>, partition: u32) -> Self {
        ActorId {
            group: group.into(),
            partition,
        }
    }
}

impl fmt::Debug for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.group, self.partition)
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.group, self.partition)
    }
}

impl FromStr for ActorId {
    type Err = String;

    /// Parses `group[partition]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let open = s.rfind('[').ok_or_else(|| format!("actor `{s}` missing `[`"))?;
        let close = s
            .strip_suffix(']')
            .ok_or_else(|| format!("actor `{s}` missing trailing `]`"))?;
        let group = &close[..open];
        let partition: u32 = close[open + 1..]
            .parse()
            .map_err(|_| format!("actor `{s}` has a bad partition index"))?;
        if group.is_empty() {
            return Err(format!("actor `{s}` has an empty group"));
        }
        Ok(ActorId::new(group, partition))
    }
}

// Actor ids serialize as their display form, usable as JSON map keys.
impl Serialize for ActorId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActorId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Concurrency-control granularity. Actor-level treats the whole actor as
/// one schedulable/lockable unit; key-level schedules and locks individual
/// keys so non-overlapping transactions interleave on the same actor.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    ActorLevel,
    KeyLevel,
}

/// Declared access intent for a key. `Read` access rejects writes in the
/// transaction's view; `ReadWrite` permits puts and deletes.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    Read,
    ReadWrite,
}

/// Identity and mode of one transaction, threaded through every actor it
/// touches. `tid` is assigned by the coordinator in strictly increasing
/// order; `bid` is the enclosing batch for PACTs and 0 for ACTs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TxnContext {
    pub tid: u64,
    pub bid: u64,
    pub is_pact: bool,
    pub granularity: Granularity,
}

impl TxnContext {
    pub fn pact(tid: u64, bid: u64, granularity: Granularity) -> Self {
        TxnContext {
            tid,
            bid,
            is_pact: true,
            granularity,
        }
    }

    pub fn act(tid: u64, granularity: Granularity) -> Self {
        TxnContext {
            tid,
            bid: 0,
            is_pact: false,
            granularity,
        }
    }
}
