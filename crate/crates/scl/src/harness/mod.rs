//! Benchmark and scenario harness: workload generation, TOML-configured
//! deployments on the simulated network, convergence audits, and metric
//! reports.
//!
//! The pieces compose in one direction: [`config`] describes a run,
//! [`workload`] turns its workload section into an operation stream,
//! [`scenario`] deploys the protocol nodes over the simulator and drives
//! the stream through them, and [`metrics`] condenses what happened into
//! a serializable report. The typical caller is either the CLI or an
//! integration test that wants a full cluster in a few lines:
//!
//! ```
//! use scl::harness::{config::RunConfig, scenario};
//!
//! let mut cfg = RunConfig::default();
//! cfg.run.duration_ms = 200;
//! cfg.topology.workers = 2;
//! let report = scenario::execute(&cfg, None).unwrap();
//! assert!(report.audit.digests_equal);
//! ```

pub mod config;
pub mod metrics;
pub mod scenario;
pub mod workload;
