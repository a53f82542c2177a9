//! TOML run configuration for simulated deployments.
//!
//! Every section and field has a default, so a config file only states
//! what it changes. Unknown fields are rejected — a typo should fail the
//! run, not silently configure nothing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epoch::ProtoConfig;
use crate::harness::workload::WorkloadCfg;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Root of a run description.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub protocol: ProtocolSection,
    pub workload: WorkloadSection,
    pub topology: TopologySection,
    pub db: DbSection,
}

/// Timing of the run itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Client traffic window, virtual milliseconds.
    pub duration_ms: u64,
    /// Quiescent tail after traffic stops: must cover at least one full
    /// epoch so the final boundary and its recovery can run.
    pub drain_ms: u64,
    /// Seed for everything: keys, delays, workload, nonces.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            duration_ms: 1_500,
            drain_ms: 600,
            seed: 42,
        }
    }
}

/// Protocol knobs, mirrored into [`ProtoConfig`] at deploy time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub epoch_us: u64,
    pub actor_tick_us: u64,
    pub batch_size: usize,
    pub freshness_window: u64,
    pub recovery_rounds: u32,
    pub recovery_batch: usize,
    pub get_timeout_us: u64,
    pub failover_epochs: u64,
    pub db_get_service_us: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtoConfig::default();
        ProtocolSection {
            epoch_us: p.epoch_us,
            actor_tick_us: p.actor_tick_us,
            batch_size: p.batch_size,
            freshness_window: p.freshness_window,
            recovery_rounds: p.recovery_rounds,
            recovery_batch: p.recovery_batch,
            get_timeout_us: p.get_timeout_us,
            failover_epochs: p.failover_epochs,
            db_get_service_us: p.db_get_service_us,
        }
    }
}

/// Operation mix, rate, and key skew.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub key_count: u64,
    pub value_len: usize,
    pub read_fraction: f64,
    pub zipf_exponent: f64,
    /// Offered load per worker.
    pub ops_per_sec_per_worker: u64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadCfg::default();
        WorkloadSection {
            key_count: w.key_count,
            value_len: w.value_len,
            read_fraction: w.read_fraction,
            zipf_exponent: w.zipf_exponent,
            ops_per_sec_per_worker: 2_000,
        }
    }
}

/// Cluster shape: a star with the coordinator at the hub, workers,
/// optional shadows, and an optional spill node on the leaves.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub workers: usize,
    pub shadows: usize,
    /// Deploy a spill node.
    pub db: bool,
    /// Per-link drop probability.
    pub loss: f64,
    pub delay_min_us: u64,
    pub delay_max_us: u64,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            workers: 4,
            shadows: 0,
            db: false,
            loss: 0.0,
            delay_min_us: 100,
            delay_max_us: 400,
        }
    }
}

/// Spill-node storage sizing (ignored unless `topology.db` is set).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DbSection {
    pub memtable_cap: usize,
    pub block_entries: usize,
    pub sync_writes: bool,
}

impl Default for DbSection {
    fn default() -> Self {
        DbSection {
            memtable_cap: 64,
            block_entries: 16,
            sync_writes: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str| Err(ConfigError::Invalid(what.to_string()));
        if self.topology.workers == 0 {
            return bad("at least one worker is required");
        }
        if !(0.0..=1.0).contains(&self.topology.loss) {
            return bad("loss must lie in [0, 1]");
        }
        if self.topology.delay_min_us > self.topology.delay_max_us {
            return bad("delay range is inverted");
        }
        if !(0.0..=1.0).contains(&self.workload.read_fraction) {
            return bad("read_fraction must lie in [0, 1]");
        }
        if self.workload.key_count == 0 || self.workload.ops_per_sec_per_worker == 0 {
            return bad("workload key_count and rate must be positive");
        }
        if self.protocol.epoch_us == 0 || self.protocol.actor_tick_us == 0 {
            return bad("protocol periods must be positive");
        }
        if self.protocol.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.workload.read_fraction > 0.0 && self.protocol.get_timeout_us == 0 {
            return bad("reads need a positive get_timeout_us");
        }
        Ok(())
    }

    /// The protocol view of this config; identities are filled in by the
    /// deployment, which knows who exists.
    pub fn proto(&self) -> ProtoConfig {
        ProtoConfig {
            epoch_us: self.protocol.epoch_us,
            actor_tick_us: self.protocol.actor_tick_us,
            batch_size: self.protocol.batch_size,
            freshness_window: self.protocol.freshness_window,
            recovery_rounds: self.protocol.recovery_rounds,
            recovery_batch: self.protocol.recovery_batch,
            get_timeout_us: self.protocol.get_timeout_us,
            failover_epochs: self.protocol.failover_epochs,
            db_get_service_us: self.protocol.db_get_service_us,
            ..Default::default()
        }
    }

    pub fn workload_cfg(&self) -> WorkloadCfg {
        WorkloadCfg {
            key_count: self.workload.key_count,
            value_len: self.workload.value_len,
            read_fraction: self.workload.read_fraction,
            zipf_exponent: self.workload.zipf_exponent,
        }
    }
}
