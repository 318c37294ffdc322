//! Run configuration: a JSON document selecting a runtime variant, a
//! workload, client shape, and batching/logging knobs.

use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use keystone::pact::BatchTriggers;
use keystone::wal::{FlushPolicy, LogMode};
use keystone::Granularity;
use keystone_workloads::marketplace::{Marketplace, MarketplaceConfig};
use keystone_workloads::smallbank::{SmallBank, SmallBankConfig};
use keystone_workloads::Workload;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Runtime variant: concurrency-control granularity plus log format, or the
/// unprotected upper-bound baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Whole-actor scheduling/locking, full-state log records.
    ActorSnapshot,
    /// Whole-actor scheduling/locking, per-operation log records.
    ActorIncremental,
    /// Per-key scheduling/locking, per-operation log records.
    KeyIncremental,
    /// No scheduling, locking, or logging; an upper-bound baseline.
    NonTxn,
}

pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::ActorSnapshot,
    Variant::ActorIncremental,
    Variant::KeyIncremental,
    Variant::NonTxn,
];

impl Variant {
    /// Directory and CSV label.
    pub fn label(self) -> &'static str {
        match self {
            Variant::ActorSnapshot => "actor-snapshot",
            Variant::ActorIncremental => "actor-incremental",
            Variant::KeyIncremental => "key-incremental",
            Variant::NonTxn => "non-txn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        for v in ALL_VARIANTS {
            if v.label() == s {
                return Ok(v);
            }
        }
        bail!(
            "unknown variant `{s}` (expected one of: {})",
            ALL_VARIANTS.map(|v| v.label()).join(", ")
        )
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Variant::KeyIncremental => Granularity::KeyLevel,
            _ => Granularity::ActorLevel,
        }
    }

    /// Effective log mode. The baseline never logs; other variants log in
    /// their format when logging is enabled.
    pub fn log_mode(self, logging_enabled: bool) -> LogMode {
        if !logging_enabled {
            return LogMode::Disabled;
        }
        match self {
            Variant::ActorSnapshot => LogMode::Snapshot,
            Variant::ActorIncremental | Variant::KeyIncremental => LogMode::Incremental,
            Variant::NonTxn => LogMode::Disabled,
        }
    }

    pub fn is_transactional(self) -> bool {
        self != Variant::NonTxn
    }
}

/// The workload half of a run config. Serialized with an inline `type` tag:
/// `{"type": "smallbank", ...}` or `{"type": "marketplace", ...}`.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadConfig {
    SmallBank(SmallBankConfig),
    Marketplace(MarketplaceConfig),
}

impl WorkloadConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            WorkloadConfig::SmallBank(_) => "smallbank",
            WorkloadConfig::Marketplace(_) => "marketplace",
        }
    }

    /// Builds the generator for one client pipeline. Pipelines get distinct
    /// seeds; marketplace pipelines additionally get disjoint customer
    /// slices so cart bookkeeping is never shared.
    pub fn build(
        &self,
        seed: u64,
        client: u32,
        clients: u32,
    ) -> Result<Box<dyn Workload>> {
        let client_seed = seed.wrapping_add(u64::from(client).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match self {
            WorkloadConfig::SmallBank(cfg) => {
                Ok(Box::new(SmallBank::new(cfg.clone(), client_seed)?))
            }
            WorkloadConfig::Marketplace(cfg) => {
                let mine: Vec<u32> =
                    (0..cfg.num_customers).filter(|c| c % clients == client).collect();
                Ok(Box::new(Marketplace::with_customers(cfg.clone(), client_seed, mine)?))
            }
        }
    }

    fn validate(&self, clients: u32) -> Result<()> {
        match self {
            WorkloadConfig::SmallBank(cfg) => cfg.validate()?,
            WorkloadConfig::Marketplace(cfg) => {
                cfg.validate()?;
                if clients > cfg.num_customers {
                    bail!(
                        "marketplace runs need workers <= numCustomers \
                         ({} workers vs {} customers)",
                        clients,
                        cfg.num_customers
                    );
                }
            }
        }
        Ok(())
    }
}

impl Serialize for WorkloadConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut v = match self {
            WorkloadConfig::SmallBank(c) => serde_json::to_value(c),
            WorkloadConfig::Marketplace(c) => serde_json::to_value(c),
        }
        .map_err(serde::ser::Error::custom)?;
        v.as_object_mut()
            .expect("workload configs serialize to objects")
            .insert("type".into(), serde_json::Value::String(self.kind().into()));
        v.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for WorkloadConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let mut v = serde_json::Value::deserialize(deserializer)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| D::Error::custom("workload must be an object"))?;
        let kind = obj
            .remove("type")
            .and_then(|t| t.as_str().map(String::from))
            .ok_or_else(|| D::Error::custom("workload needs a string `type` field"))?;
        match kind.as_str() {
            "smallbank" => serde_json::from_value(v)
                .map(WorkloadConfig::SmallBank)
                .map_err(D::Error::custom),
            "marketplace" => serde_json::from_value(v)
                .map(WorkloadConfig::Marketplace)
                .map_err(D::Error::custom),
            other => Err(D::Error::custom(format!(
                "unknown workload type `{other}` (expected smallbank or marketplace)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FlushSetting {
    PerRecord,
    Batched,
    Never,
}

impl From<FlushSetting> for FlushPolicy {
    fn from(f: FlushSetting) -> FlushPolicy {
        match f {
            FlushSetting::PerRecord => FlushPolicy::PerRecord,
            FlushSetting::Batched => FlushPolicy::Batched,
            FlushSetting::Never => FlushPolicy::Never,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Concurrent client pipelines.
    #[serde(default = "default_workers")]
    pub workers: u32,
    /// In-flight transactions per client pipeline.
    #[serde(default = "default_pipeline_size")]
    pub pipeline_size: u32,
    /// Measured transaction count (exclusive with `durationSecs`).
    #[serde(default)]
    pub txns: Option<u64>,
    /// Measured wall-clock seconds (exclusive with `txns`).
    #[serde(default)]
    pub duration_secs: Option<f64>,
    /// Transactions run before measurement starts. Defaults to 10% of
    /// `txns`, or two seconds in duration mode.
    #[serde(default)]
    pub warmup_txns: Option<u64>,
    #[serde(default = "default_true")]
    pub logging_enabled: bool,
    /// Log flush policy when logging is enabled.
    #[serde(default = "default_flush")]
    pub flush: FlushSetting,
    pub workload: WorkloadConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Scheduler batch-size trigger.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Scheduler batch-delay trigger, microseconds.
    #[serde(default = "default_batch_delay_micros")]
    pub batch_delay_micros: u64,
    /// Tokio worker threads.
    #[serde(default = "default_threads")]
    pub threads: u32,
    /// Retry budget for lock-based transactions that abort under contention.
    #[serde(default)]
    pub act_retry_limit: Option<u32>,
}

fn default_workers() -> u32 {
    1
}

fn default_pipeline_size() -> u32 {
    8
}

fn default_true() -> bool {
    true
}

fn default_flush() -> FlushSetting {
    FlushSetting::Batched
}

fn default_seed() -> u64 {
    1
}

fn default_batch_size() -> usize {
    64
}

fn default_batch_delay_micros() -> u64 {
    2_000
}

fn default_threads() -> u32 {
    4
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.pipeline_size == 0 {
            bail!("workers and pipelineSize must be at least 1");
        }
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batchSize must be at least 1");
        }
        match (self.txns, self.duration_secs) {
            (None, None) => bail!("config needs either txns or durationSecs"),
            (Some(_), Some(_)) => bail!("txns and durationSecs are mutually exclusive"),
            (Some(0), _) => bail!("txns must be at least 1"),
            (_, Some(d)) if d <= 0.0 => bail!("durationSecs must be positive"),
            _ => {}
        }
        self.workload.validate(self.workers)?;
        Ok(())
    }

    pub fn batch_triggers(&self) -> BatchTriggers {
        BatchTriggers {
            max_size: self.batch_size,
            max_delay: Duration::from_micros(self.batch_delay_micros),
        }
    }

    /// Warmup transaction budget for count-driven runs.
    pub fn effective_warmup_txns(&self) -> u64 {
        match (self.warmup_txns, self.txns) {
            (Some(w), _) => w,
            (None, Some(t)) => t / 10,
            (None, None) => 0,
        }
    }
}
