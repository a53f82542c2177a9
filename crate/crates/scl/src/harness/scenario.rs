//! Deploys a full cluster on the simulated network, drives a workload
//! through it, and audits the outcome.
//!
//! A deployment is a star with the active coordinator at the hub and
//! workers, shadows, and the optional spill node on the leaves. Client
//! operations are scheduled against the workers at a configured rate;
//! after the traffic window a quiescent drain lets the final epoch
//! boundary and its recovery complete. The audit then holds the cluster
//! to its own story: all replica tables must carry one digest, every
//! chain must authenticate, and the replicated state must equal an
//! independent replay of the union of all records.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::capsuledb::{DbConfig, DbError, DbNode};
use crate::chain::Chain;
use crate::epoch::{
    ClientOp, Coordinator, GetSource, ProtoConfig, Role, Worker, TOK_ACTOR, TOK_MONITOR, TOK_TICK,
};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{percentiles, AuditReport, GetBreakdown, RunReport};
use crate::harness::workload::{Op, WorkloadGen};
use crate::keys::{provision, KeyError, KeyRegistry, Provisioned};
use crate::memtable::{wins, Memtable, Version};
use crate::record::{open_record, verify_record, MsgType, RecordHash, SenderId, Verdict};
use crate::simnet::{Ctx, LinkCfg, NodeIdx, Sim, SimConfig, SimNode, SimReport, Topology, TopologyError};

/// Sender identity of the spill node when one is deployed.
pub const DB_SENDER: SenderId = SenderId(90);

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store: {0}")]
    Db(#[from] DbError),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("keys: {0}")]
    Keys(#[from] KeyError),
}

/// One node of a deployed cluster.
pub enum ProtocolNode {
    Coordinator(Box<Coordinator>),
    Worker(Box<Worker>),
    Db(Box<DbNode>),
}

impl ProtocolNode {
    pub fn chain(&self) -> &Chain {
        match self {
            ProtocolNode::Coordinator(c) => c.chain(),
            ProtocolNode::Worker(w) => w.chain(),
            ProtocolNode::Db(d) => d.chain(),
        }
    }

    pub fn set_alive(&mut self, alive: bool) {
        match self {
            ProtocolNode::Coordinator(c) => c.set_alive(alive),
            ProtocolNode::Worker(w) => w.set_alive(alive),
            ProtocolNode::Db(d) => d.set_alive(alive),
        }
    }

    pub fn as_worker(&self) -> Option<&Worker> {
        match self {
            ProtocolNode::Worker(w) => Some(w),
            _ => None,
        }
    }

    pub fn as_coordinator(&self) -> Option<&Coordinator> {
        match self {
            ProtocolNode::Coordinator(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_db_mut(&mut self) -> Option<&mut DbNode> {
        match self {
            ProtocolNode::Db(d) => Some(d),
            _ => None,
        }
    }

    /// Plaintext table of this node, if it keeps one in memory.
    fn memtable(&self) -> Option<&Memtable> {
        match self {
            ProtocolNode::Coordinator(c) => Some(c.memtable()),
            ProtocolNode::Worker(w) => Some(w.memtable()),
            ProtocolNode::Db(_) => None,
        }
    }
}

impl SimNode for ProtocolNode {
    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &[u8]) {
        match self {
            ProtocolNode::Coordinator(c) => c.on_message(ctx, msg),
            ProtocolNode::Worker(w) => w.on_message(ctx, msg),
            ProtocolNode::Db(d) => d.on_message(ctx, msg),
        }
    }
    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        match self {
            ProtocolNode::Coordinator(c) => c.on_timer(ctx, token),
            ProtocolNode::Worker(w) => w.on_timer(ctx, token),
            ProtocolNode::Db(d) => d.on_timer(ctx, token),
        }
    }
    fn on_client(&mut self, ctx: &mut Ctx<'_>, op: &[u8]) {
        match self {
            ProtocolNode::Coordinator(c) => c.on_client(ctx, op),
            ProtocolNode::Worker(w) => w.on_client(ctx, op),
            ProtocolNode::Db(d) => d.on_client(ctx, op),
        }
    }
}

/// A built cluster ready to run.
pub struct Deployment {
    pub sim: Sim<ProtocolNode>,
    pub cfg: RunConfig,
    pub proto: ProtoConfig,
    pub provisioned: Provisioned,
    pub coordinator: NodeIdx,
    pub workers: Vec<NodeIdx>,
    pub shadows: Vec<NodeIdx>,
    pub db: Option<NodeIdx>,
    /// Where the spill node keeps its store, when deployed.
    pub db_dir: Option<PathBuf>,
    scheduled_puts: u64,
    scheduled_gets: u64,
}

/// Builds the cluster described by `cfg`. The spill store lands in
/// `db_dir` when given, otherwise in a fresh directory under the system
/// temp dir.
pub fn deploy(cfg: &RunConfig, db_dir: Option<PathBuf>) -> Result<Deployment, DeployError> {
    let w = cfg.topology.workers;
    let s = cfg.topology.shadows;
    let seed = cfg.run.seed;

    let mut senders: Vec<SenderId> = vec![SenderId(0)];
    senders.extend((1..=w as u64).map(SenderId));
    if cfg.topology.db {
        senders.push(DB_SENDER);
    }
    let shadow_ids: Vec<SenderId> = (0..s as u64).map(|i| SenderId(100 + i)).collect();
    senders.extend(shadow_ids.iter().copied());

    let owner_seed = format!("owner-seed-{seed}");
    let provisioned = provision(owner_seed.as_bytes(), 0, &senders)?;

    let mut proto = cfg.proto();
    proto.coordinators = vec![SenderId(0)];
    proto.coordinators.extend(shadow_ids.iter().copied());
    proto.writers = (1..=w as u64).map(SenderId).collect();
    if cfg.topology.db {
        proto.writers.push(DB_SENDER);
        proto.db = Some(DB_SENDER);
    }

    let mut nodes = Vec::new();
    nodes.push(ProtocolNode::Coordinator(Box::new(Coordinator::new(
        provisioned.workers[0].clone(),
        Role::Active,
        proto.clone(),
        seed,
    ))));
    for i in 0..w {
        nodes.push(ProtocolNode::Worker(Box::new(Worker::new(
            provisioned.workers[1 + i].clone(),
            proto.clone(),
            seed,
        ))));
    }
    let mut db_dir_used = None;
    if cfg.topology.db {
        let dir = match db_dir {
            Some(d) => d,
            None => std::env::temp_dir().join(format!(
                "scl-sim-{}-{}-{}",
                std::process::id(),
                seed,
                RUN_COUNTER.fetch_add(1, Ordering::Relaxed),
            )),
        };
        std::fs::create_dir_all(&dir)?;
        let db_cfg = DbConfig {
            memtable_cap: cfg.db.memtable_cap,
            block_entries: cfg.db.block_entries,
            sync_writes: cfg.db.sync_writes,
            ..Default::default()
        };
        let (node, _) = DbNode::new(
            provisioned.workers[1 + w].clone(),
            &dir,
            db_cfg,
            proto.clone(),
            seed,
        )?;
        nodes.push(ProtocolNode::Db(Box::new(node)));
        db_dir_used = Some(dir);
    }
    let shadow_base = nodes.len();
    for i in 0..s {
        let bundle_idx = 1 + w + cfg.topology.db as usize + i;
        nodes.push(ProtocolNode::Coordinator(Box::new(Coordinator::new(
            provisioned.workers[bundle_idx].clone(),
            Role::Shadow { rank: i as u32 },
            proto.clone(),
            seed,
        ))));
    }

    let total = nodes.len();
    let link = LinkCfg {
        loss: cfg.topology.loss,
        delay_min_us: cfg.topology.delay_min_us,
        delay_max_us: cfg.topology.delay_max_us,
    };
    let topo = Topology::star(total, link);
    let mut sim = Sim::new(
        &topo,
        SimConfig {
            seed,
            ..Default::default()
        },
        nodes,
    )?;

    // Boot cadence: the epoch driver on the hub, batching ticks on the
    // workers, silence monitors on the shadows.
    sim.schedule_timer(proto.epoch_us, NodeIdx(0), TOK_TICK);
    for i in 0..w {
        sim.schedule_timer(proto.actor_tick_us, NodeIdx(1 + i), TOK_ACTOR);
    }
    for i in 0..s {
        sim.schedule_timer(proto.epoch_us, NodeIdx(shadow_base + i), TOK_MONITOR);
    }

    Ok(Deployment {
        sim,
        cfg: cfg.clone(),
        proto,
        provisioned,
        coordinator: NodeIdx(0),
        workers: (1..=w).map(NodeIdx).collect(),
        shadows: (0..s).map(|i| NodeIdx(shadow_base + i)).collect(),
        db: cfg.topology.db.then(|| NodeIdx(1 + w)),
        db_dir: db_dir_used,
        scheduled_puts: 0,
        scheduled_gets: 0,
    })
}

/// Schedules the whole traffic window: every worker gets its own
/// deterministic operation stream at the configured rate, with jittered
/// arrivals so ticks do not line up across workers.
pub fn schedule_workload(dep: &mut Deployment) {
    let duration_us = dep.cfg.run.duration_ms * 1_000;
    let rate = dep.cfg.workload.ops_per_sec_per_worker;
    let interarrival = (1_000_000 / rate).max(1);
    for (i, &node) in dep.workers.clone().iter().enumerate() {
        let mut gen = WorkloadGen::new(dep.cfg.workload_cfg(), dep.cfg.run.seed ^ (1_000 + i as u64));
        let mut arrivals = ChaCha20Rng::seed_from_u64(dep.cfg.run.seed ^ (2_000 + i as u64));
        let mut t = 1 + (i as u64 * 41) % interarrival;
        while t < duration_us {
            let bytes = match gen.next_op() {
                Op::Put { key, value } => {
                    dep.scheduled_puts += 1;
                    ClientOp::Put { key, value }.to_bytes()
                }
                Op::Get { key } => {
                    dep.scheduled_gets += 1;
                    ClientOp::Get { key }.to_bytes()
                }
            };
            dep.sim.schedule_client(t, node, bytes);
            // ±25% jitter around the nominal interarrival gap.
            let jitter = arrivals.gen_range((interarrival * 3 / 4)..=(interarrival * 5 / 4).max(1));
            t += jitter.max(1);
        }
    }
}

/// Runs traffic plus drain to quiescence.
pub fn run_to_quiescence(dep: &mut Deployment) -> SimReport {
    let until = (dep.cfg.run.duration_ms + dep.cfg.run.drain_ms) * 1_000;
    dep.sim.run_until(until)
}

/// Independent replay: fold every decodable update in `records` under
/// last-writer-wins and return the winning version per key.
fn replay_oracle(
    records: &HashMap<RecordHash, &crate::record::CapsuleRecord>,
    group: &crate::record::SymmetricKey,
) -> Option<BTreeMap<Vec<u8>, Version>> {
    let mut state: BTreeMap<Vec<u8>, Version> = BTreeMap::new();
    for record in records.values() {
        if record.header.msg_type != MsgType::Data {
            continue;
        }
        let payload = open_record(record, group).ok()?;
        let lines = crate::record::decode_batch(&payload).ok()?;
        for line in lines {
            let origin = line.origin.unwrap_or(record.header.sender);
            let v = Version {
                value: line.entry.value,
                ts: line.entry.lamport_ts,
                origin,
            };
            match state.get(&line.entry.key) {
                Some(cur) if !wins(v.ts, v.origin, cur) => {}
                _ => {
                    state.insert(line.entry.key, v);
                }
            }
        }
    }
    Some(state)
}

fn memtable_matches(mem: &Memtable, oracle: &BTreeMap<Vec<u8>, Version>) -> bool {
    if mem.len() != oracle.len() {
        return false;
    }
    mem.iter().all(|(k, v)| oracle.get(k) == Some(v))
}

/// Post-run convergence and integrity audit.
pub fn audit(dep: &mut Deployment) -> AuditReport {
    let mut replica_nodes: Vec<NodeIdx> = vec![dep.coordinator];
    replica_nodes.extend(&dep.workers);
    replica_nodes.extend(&dep.shadows);

    // One digest to rule the cluster.
    let mut digests = Vec::new();
    for &idx in &replica_nodes {
        if let Some(mem) = dep.sim.node(idx).memtable() {
            digests.push(mem.digest());
        }
    }
    let digests_equal = digests.windows(2).all(|p| p[0] == p[1]);

    // Authenticate every record every node holds, under the worker keys
    // derivable from the application public key.
    let mut registry = KeyRegistry::new();
    registry.register(0, dep.provisioned.app_public.clone());
    let mut chains_authentic = true;
    let mut all_nodes: Vec<NodeIdx> = replica_nodes.clone();
    if let Some(db) = dep.db {
        all_nodes.push(db);
    }
    for &idx in &all_nodes {
        let chain = dep.sim.node(idx).chain();
        let ok = chain
            .authenticate(|r| {
                let Some(dir) = registry.active_at(r.header.epoch_seq) else {
                    return Verdict::BadSignature;
                };
                verify_record(r, &dir.verify_key(r.header.sender))
            })
            .is_ok();
        chains_authentic &= ok;
    }

    // Replay the union of all records and hold every table to it.
    let mut union: HashMap<RecordHash, &crate::record::CapsuleRecord> = HashMap::new();
    for &idx in &all_nodes {
        for r in dep.sim.node(idx).chain().iter() {
            union.insert(r.record_hash, r);
        }
    }
    let group = dep.provisioned.group.clone();
    let oracle = replay_oracle(&union, &group);
    let oracle_matches = match &oracle {
        None => false,
        Some(state) => replica_nodes.iter().all(|&idx| {
            dep.sim
                .node(idx)
                .memtable()
                .is_none_or(|mem| memtable_matches(mem, state))
        }),
    };

    // The spill store replays the same records through its own tiers; its
    // digest must land on the replica digest.
    let db_digest_matches = dep.db.map(|idx| {
        let reference = digests.first().copied();
        match (dep.sim.node_mut(idx).as_db_mut(), reference) {
            (Some(db), Some(want)) => db.engine().digest().map(|d| d == want).unwrap_or(false),
            _ => false,
        }
    });

    let mut stale_drops = 0;
    let mut records_recovered = 0;
    let mut unrecovered = 0;
    for &idx in &replica_nodes {
        match dep.sim.node(idx) {
            ProtocolNode::Coordinator(c) => {
                stale_drops += c.stats().stale_drops;
                records_recovered += c.stats().records_recovered;
                unrecovered += c.stats().unrecovered;
            }
            ProtocolNode::Worker(w) => {
                stale_drops += w.stats().stale_drops;
                records_recovered += w.stats().records_recovered;
            }
            ProtocolNode::Db(_) => {}
        }
    }
    if let Some(idx) = dep.db {
        if let ProtocolNode::Db(d) = dep.sim.node(idx) {
            stale_drops += d.stats().stale_drops;
            records_recovered += d.stats().records_recovered;
        }
    }

    AuditReport {
        digests_equal,
        chains_authentic,
        oracle_matches,
        db_digest_matches,
        node_digests: digests.iter().map(hex::encode).collect(),
        stale_drops,
        records_recovered,
        unrecovered,
    }
}

/// Condenses a finished run into its report.
pub fn summarize(dep: &mut Deployment, sim_report: SimReport) -> RunReport {
    let audit = audit(dep);
    let mut puts_applied = 0;
    let mut gets_issued = 0;
    let mut breakdown = GetBreakdown::default();
    let mut latencies: Vec<u64> = Vec::new();
    for &idx in &dep.workers.clone() {
        if let Some(w) = dep.sim.node(idx).as_worker() {
            puts_applied += w.stats().puts;
            gets_issued += w.stats().gets_issued;
            for g in &w.get_log {
                match g.source {
                    GetSource::Local => breakdown.local += 1,
                    GetSource::Injected => breakdown.injected += 1,
                    GetSource::DbMiss => breakdown.db_miss += 1,
                    GetSource::Timeout => breakdown.timeout += 1,
                }
                if g.source != GetSource::Timeout {
                    latencies.push(g.completed_us.saturating_sub(g.issued_us));
                }
            }
        }
    }
    let mut epochs = 0;
    for &idx in std::iter::once(&dep.coordinator).chain(&dep.shadows) {
        if let Some(c) = dep.sim.node(idx).as_coordinator() {
            epochs += c.stats().epochs_sealed;
        }
    }
    let duration_secs = (dep.cfg.run.duration_ms as f64 / 1_000.0).max(1e-9);
    RunReport {
        seed: dep.cfg.run.seed,
        workers: dep.cfg.topology.workers,
        virtual_secs: sim_report.end_time_us as f64 / 1_000_000.0,
        puts_issued: puts_applied,
        gets_issued,
        gets: breakdown,
        put_throughput: puts_applied as f64 / duration_secs,
        get_throughput: breakdown.answered() as f64 / duration_secs,
        get_latency_us: percentiles(&mut latencies),
        epochs,
        audit,
        events: sim_report.stats.events,
        multicasts: sim_report.stats.multicasts,
        deliveries: sim_report.stats.deliveries,
        link_drops: sim_report.stats.link_drops,
    }
}

/// Deploy, drive, drain, audit: the whole run in one call.
pub fn execute(cfg: &RunConfig, db_dir: Option<PathBuf>) -> Result<RunReport, DeployError> {
    let mut dep = deploy(cfg, db_dir)?;
    schedule_workload(&mut dep);
    let sim_report = run_to_quiescence(&mut dep);
    Ok(summarize(&mut dep, sim_report))
}
