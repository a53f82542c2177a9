//! `scl` command line: run simulated clusters from TOML descriptions,
//! benchmark the sealing pipeline and the boundary ring, verify record
//! files offline, and inspect a spill store's level structure.
//!
//! Benchmarks and runs report JSON on stdout by default, or CSV rows with
//! `--csv`; progress chatter goes to stderr so the metrics stay pipeable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scl::capsuledb::{at_rest_key, CapsuleDb, DbConfig, DbKeys};
use scl::harness::config::RunConfig;
use scl::harness::metrics::RunReport;
use scl::harness::scenario::{self, Deployment};
use scl::keys::{provision, ExtendedPublicKey, KeyRegistry};
use scl::pipeline::{run_pipeline, PipelineConfig};
use scl::record::{
    append_frame, decode_batch, open_record, split_frames, verify_record, CapsuleRecord, KvEntry,
    MsgType, SenderId, SymmetricKey, Verdict,
};
use scl::ring::{bench, RingConfig};
use scl::simnet::NodeIdx;

#[derive(Parser)]
#[command(
    name = "scl",
    version,
    about = "Replicated KV store over signed, hash-linked records: simulator, benchmarks, and inspection tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated cluster from a TOML description and report the outcome.
    Sim(SimArgs),
    /// Sweep worker counts over full simulated runs.
    BenchE2e(BenchE2eArgs),
    /// Drive entries through encrypt, hash-link, sign, and emit stages.
    BenchPipeline(BenchPipelineArgs),
    /// Compare the boundary ring against a copying rendezvous channel.
    BenchRing(BenchRingArgs),
    /// Check a record file against a public-key sidecar.
    VerifyCapsule(VerifyArgs),
    /// Dump the level occupancy and frontier of a spill store directory.
    DbLevels(DbLevelsArgs),
}

/// Public-key sidecar consumed by `verify-capsule` and written by
/// `sim --dump-keys`: one entry per application-key era, each carrying the
/// hex of the 65-byte extended public key whose children verify senders.
#[derive(Serialize, Deserialize)]
struct KeySidecar {
    eras: Vec<SidecarEra>,
}

#[derive(Serialize, Deserialize)]
struct SidecarEra {
    /// First epoch this era's key covers.
    start_epoch: u64,
    /// Hex of [`ExtendedPublicKey::to_bytes`].
    app_public: String,
}

#[derive(Args)]
struct SimArgs {
    /// Run description (TOML). Missing sections take their defaults.
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the client traffic window, milliseconds.
    #[arg(long)]
    duration_ms: Option<u64>,
    /// Override the per-link drop probability.
    #[arg(long)]
    loss: Option<f64>,
    /// Emit one CSV row instead of JSON.
    #[arg(long)]
    csv: bool,
    /// Put the spill store here instead of a temp directory, and keep it.
    #[arg(long, value_name = "DIR")]
    db_dir: Option<PathBuf>,
    /// After the run, write each node's records as one framed file per
    /// node under DIR (readable by verify-capsule).
    #[arg(long, value_name = "DIR")]
    dump_chain: Option<PathBuf>,
    /// After the run, write the public-key sidecar for this deployment.
    #[arg(long, value_name = "FILE")]
    dump_keys: Option<PathBuf>,
}

#[derive(Args)]
struct BenchE2eArgs {
    /// Worker counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    workers: Vec<usize>,
    /// Client traffic window per run, milliseconds.
    #[arg(long, default_value_t = 1_500)]
    duration_ms: u64,
    /// Quiescent tail per run, milliseconds.
    #[arg(long, default_value_t = 600)]
    drain_ms: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Per-link drop probability.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// Fraction of client operations that are gets.
    #[arg(long, default_value_t = 0.0)]
    read_fraction: f64,
    /// Offered load per worker, operations per virtual second.
    #[arg(long, default_value_t = 2_000)]
    ops_per_sec: u64,
    /// Deploy a spill node alongside the workers.
    #[arg(long)]
    db: bool,
    /// Modeled spill-store service time per get, microseconds.
    #[arg(long, default_value_t = 0)]
    db_get_service_us: u64,
    /// Emit CSV rows instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct BenchPipelineArgs {
    /// Signer thread counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    actors: Vec<usize>,
    /// Entries-per-record batch sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
    batch: Vec<usize>,
    /// Entries pushed through per run.
    #[arg(long, default_value_t = 20_000)]
    entries: usize,
    /// Value bytes per entry.
    #[arg(long, default_value_t = 100)]
    value_len: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Emit CSV rows instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct BenchRingArgs {
    /// Payload sizes in bytes (at least 8 each).
    #[arg(long, value_delimiter = ',', default_value = "64,4096")]
    payloads: Vec<usize>,
    /// Messages per timed pass.
    #[arg(long, default_value_t = 200_000)]
    messages: u64,
    /// Ring slots; must be a power of two.
    #[arg(long, default_value_t = 1024)]
    capacity: usize,
    /// Arena bytes per slot.
    #[arg(long, default_value_t = 16 * 1024)]
    chunk: usize,
    /// Extra ring-only pass of this many 64-byte messages with full
    /// order and integrity checking (0 = skip).
    #[arg(long, default_value_t = 0)]
    stress: u64,
    /// Emit CSV rows instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Record file: either one raw record or length-prefixed frames.
    file: PathBuf,
    /// Public-key sidecar (JSON, one entry per key era).
    #[arg(long, value_name = "FILE")]
    keys: PathBuf,
    /// Hex of the 32-byte group key; when given, DATA payloads are
    /// decrypted and their entries printed.
    #[arg(long, value_name = "HEX")]
    group_key: Option<String>,
}

#[derive(Args)]
struct DbLevelsArgs {
    /// Spill store directory.
    dir: PathBuf,
    /// Reconstructs the store's keys from the owner seed "owner-seed-N",
    /// the derivation `sim` uses.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Raw owner seed string; overrides --seed.
    #[arg(long)]
    owner_seed: Option<String>,
    /// Sender id the store seals blocks under.
    #[arg(long, default_value_t = scenario::DB_SENDER.0)]
    sender: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(args) => run_sim(args),
        Command::BenchE2e(args) => run_bench_e2e(args),
        Command::BenchPipeline(args) => run_bench_pipeline(args),
        Command::BenchRing(args) => run_bench_ring(args),
        Command::VerifyCapsule(args) => run_verify(args),
        Command::DbLevels(args) => run_db_levels(args),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run_sim(args: SimArgs) -> Result<ExitCode, String> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.topology.workers = workers;
    }
    if let Some(ms) = args.duration_ms {
        cfg.run.duration_ms = ms;
    }
    if let Some(loss) = args.loss {
        cfg.topology.loss = loss;
    }

    let mut dep = scenario::deploy(&cfg, args.db_dir.clone()).map_err(|e| e.to_string())?;
    scenario::schedule_workload(&mut dep);
    let sim_report = scenario::run_to_quiescence(&mut dep);

    if let Some(dir) = &args.dump_chain {
        dump_chains(&dep, dir).map_err(|e| e.to_string())?;
        eprintln!("chains written under {}", dir.display());
    }
    if let Some(path) = &args.dump_keys {
        let sidecar = KeySidecar {
            eras: vec![SidecarEra {
                start_epoch: 0,
                app_public: hex::encode(dep.provisioned.app_public.to_bytes()),
            }],
        };
        fs::write(path, serde_json::to_string_pretty(&sidecar).unwrap())
            .map_err(|e| e.to_string())?;
        eprintln!("key sidecar written to {}", path.display());
    }

    let report = scenario::summarize(&mut dep, sim_report);
    if args.csv {
        println!("{}", RunReport::csv_header());
        println!("{}", report.to_csv_row());
    } else {
        println!("{}", report.to_json());
    }
    // Scripts use the exit status as a convergence check.
    Ok(if report.audit.clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Writes each node's record set as sorted length-prefixed frames, one
/// file per node, named by role and sender id.
fn dump_chains(dep: &Deployment, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut targets: Vec<(String, NodeIdx)> = vec![("coordinator-000".into(), dep.coordinator)];
    for (i, &idx) in dep.workers.iter().enumerate() {
        targets.push((format!("worker-{:03}", i + 1), idx));
    }
    if let Some(idx) = dep.db {
        targets.push((format!("db-{:03}", scenario::DB_SENDER.0), idx));
    }
    for (i, &idx) in dep.shadows.iter().enumerate() {
        targets.push((format!("shadow-{:03}", 100 + i), idx));
    }
    for (name, idx) in targets {
        let mut records: Vec<&CapsuleRecord> = dep.sim.node(idx).chain().iter().collect();
        records.sort_by_key(|r| {
            (
                r.header.epoch_seq,
                r.header.lamport_ts,
                r.header.sender,
                r.record_hash,
            )
        });
        let mut out = Vec::new();
        for r in records {
            append_frame(&mut out, r);
        }
        fs::write(dir.join(format!("{name}.records")), out)?;
    }
    Ok(())
}

fn run_bench_e2e(args: BenchE2eArgs) -> Result<ExitCode, String> {
    if args.workers.is_empty() {
        return Err("need at least one worker count".into());
    }
    let mut reports = Vec::new();
    for &workers in &args.workers {
        let mut cfg = RunConfig::default();
        cfg.run.duration_ms = args.duration_ms;
        cfg.run.drain_ms = args.drain_ms;
        cfg.run.seed = args.seed;
        cfg.topology.workers = workers;
        cfg.topology.loss = args.loss;
        cfg.topology.db = args.db;
        cfg.workload.read_fraction = args.read_fraction;
        cfg.workload.ops_per_sec_per_worker = args.ops_per_sec;
        cfg.protocol.db_get_service_us = args.db_get_service_us;
        eprintln!(
            "running: workers={workers} duration={}ms loss={} read_fraction={}",
            args.duration_ms, args.loss, args.read_fraction
        );
        let report = scenario::execute(&cfg, None).map_err(|e| e.to_string())?;
        eprintln!(
            "  put/s={:.0} get/s={:.0} epochs={} audit_clean={}",
            report.put_throughput,
            report.get_throughput,
            report.epochs,
            report.audit.clean()
        );
        reports.push(report);
    }
    if args.csv {
        println!("{}", RunReport::csv_header());
        for r in &reports {
            println!("{}", r.to_csv_row());
        }
    } else {
        println!("{}", serde_json::to_string_pretty(&reports).unwrap());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_bench_pipeline(args: BenchPipelineArgs) -> Result<ExitCode, String> {
    #[derive(Serialize)]
    struct Row {
        actors: usize,
        batch: usize,
        entries: u64,
        records: u64,
        elapsed_secs: f64,
        entries_per_sec: f64,
        chain_intact: bool,
        sample_verified: bool,
    }

    let prov = provision(b"bench-pipeline-owner", 0, &[SenderId(1)]).map_err(|e| e.to_string())?;
    let bundle = &prov.workers[0];
    let entries: Vec<KvEntry> = (0..args.entries)
        .map(|i| KvEntry {
            key: format!("user{:08}", i % 100_000).into_bytes(),
            value: vec![0xAB; args.value_len],
            lamport_ts: i as u64 + 1,
        })
        .collect();

    let mut rows = Vec::new();
    for &actors in &args.actors {
        for &batch in &args.batch {
            eprintln!(
                "running: actors={actors} batch={batch} entries={}",
                args.entries
            );
            let cfg = PipelineConfig {
                actors,
                batch_size: batch,
                seed: args.seed,
                ..PipelineConfig::default()
            };
            let report = run_pipeline(&entries, SenderId(1), &bundle.group, &bundle.signing, &cfg);
            eprintln!(
                "  {:.0} entries/s over {} records, chain_intact={} sample_verified={}",
                report.entries_per_sec(),
                report.records,
                report.chain_intact,
                report.sample_verified
            );
            rows.push(Row {
                actors,
                batch,
                entries: report.entries,
                records: report.records,
                elapsed_secs: report.elapsed.as_secs_f64(),
                entries_per_sec: report.entries_per_sec(),
                chain_intact: report.chain_intact,
                sample_verified: report.sample_verified,
            });
        }
    }
    if args.csv {
        println!("actors,batch,entries,records,elapsed_secs,entries_per_sec,chain_intact,sample_verified");
        for r in &rows {
            println!(
                "{},{},{},{},{:.6},{:.1},{},{}",
                r.actors,
                r.batch,
                r.entries,
                r.records,
                r.elapsed_secs,
                r.entries_per_sec,
                r.chain_intact,
                r.sample_verified
            );
        }
    } else {
        println!("{}", serde_json::to_string_pretty(&rows).unwrap());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_bench_ring(args: BenchRingArgs) -> Result<ExitCode, String> {
    #[derive(Serialize)]
    struct Row {
        payload: usize,
        messages: u64,
        ring_msgs_per_sec: f64,
        baseline_msgs_per_sec: f64,
        speedup: f64,
    }
    #[derive(Serialize)]
    struct Stress {
        payload: usize,
        messages: u64,
        msgs_per_sec: f64,
        /// The stress drive checks every sequence number; reaching the end
        /// means nothing was lost, torn, or reordered.
        in_order: bool,
    }
    #[derive(Serialize)]
    struct Out {
        runs: Vec<Row>,
        stress: Option<Stress>,
    }

    let config = RingConfig {
        capacity: args.capacity,
        chunk_size: args.chunk,
        poison_on_free: false,
    };
    let mut runs = Vec::new();
    for &payload in &args.payloads {
        if payload < 8 {
            return Err(format!("payload {payload} too small; need at least 8 bytes"));
        }
        eprintln!("running: payload={payload}B messages={}", args.messages);
        let ring = bench::ring_throughput(config.clone(), payload, args.messages);
        let base = bench::baseline_throughput(payload, args.messages);
        eprintln!(
            "  ring {:.0}/s vs baseline {:.0}/s ({:.2}x)",
            ring,
            base,
            ring / base
        );
        runs.push(Row {
            payload,
            messages: args.messages,
            ring_msgs_per_sec: ring,
            baseline_msgs_per_sec: base,
            speedup: ring / base,
        });
    }
    let stress = if args.stress > 0 {
        eprintln!("running: stress pass of {} messages", args.stress);
        let rate = bench::ring_throughput(config, 64, args.stress);
        eprintln!("  {rate:.0}/s, all in order");
        Some(Stress {
            payload: 64,
            messages: args.stress,
            msgs_per_sec: rate,
            in_order: true,
        })
    } else {
        None
    };

    if args.csv {
        println!("payload,messages,ring_msgs_per_sec,baseline_msgs_per_sec,speedup");
        for r in &runs {
            println!(
                "{},{},{:.1},{:.1},{:.3}",
                r.payload, r.messages, r.ring_msgs_per_sec, r.baseline_msgs_per_sec, r.speedup
            );
        }
        if let Some(s) = &stress {
            println!("stress-{},{},{:.1},,", s.payload, s.messages, s.msgs_per_sec);
        }
    } else {
        let out = Out { runs, stress };
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(args: VerifyArgs) -> Result<ExitCode, String> {
    let bytes = fs::read(&args.file).map_err(|e| format!("{}: {e}", args.file.display()))?;
    let records = match CapsuleRecord::from_bytes(&bytes) {
        Ok(r) => vec![r],
        Err(_) => {
            let rs = split_frames(&bytes);
            if rs.is_empty() {
                return Err(format!(
                    "{}: neither a raw record nor length-prefixed frames",
                    args.file.display()
                ));
            }
            rs
        }
    };

    let sidecar_text =
        fs::read_to_string(&args.keys).map_err(|e| format!("{}: {e}", args.keys.display()))?;
    let sidecar: KeySidecar =
        serde_json::from_str(&sidecar_text).map_err(|e| format!("key sidecar: {e}"))?;
    if sidecar.eras.is_empty() {
        return Err("key sidecar lists no eras".into());
    }
    let mut registry = KeyRegistry::new();
    for era in &sidecar.eras {
        let raw = hex::decode(&era.app_public)
            .map_err(|e| format!("era {}: app_public hex: {e}", era.start_epoch))?;
        let key = ExtendedPublicKey::from_bytes(&raw)
            .map_err(|e| format!("era {}: {e}", era.start_epoch))?;
        registry.register(era.start_epoch, key);
    }
    let group = match &args.group_key {
        Some(hexstr) => {
            let raw = hex::decode(hexstr).map_err(|e| format!("group key hex: {e}"))?;
            let arr: [u8; 32] = raw
                .as_slice()
                .try_into()
                .map_err(|_| "group key must be 32 bytes".to_string())?;
            Some(SymmetricKey(arr))
        }
        None => None,
    };

    let mut bad = 0u64;
    for (i, r) in records.iter().enumerate() {
        let (ok, verdict) = match registry.active_at(r.header.epoch_seq) {
            Some(dir) => {
                let v = verify_record(r, &dir.verify_key(r.header.sender));
                (v == Verdict::Ok, format!("{v:?}"))
            }
            None => (false, "NoEraCoversEpoch".into()),
        };
        println!(
            "#{i} sender={} epoch={} ts={} type={:?} hash={} verdict={verdict}",
            r.header.sender.0,
            r.header.epoch_seq,
            r.header.lamport_ts,
            r.header.msg_type,
            &hex::encode(r.record_hash.0)[..16],
        );
        if !ok {
            bad += 1;
            continue;
        }
        if let (Some(g), MsgType::Data) = (&group, r.header.msg_type) {
            match open_record(r, g).map_err(|e| e.to_string()).and_then(|pt| {
                decode_batch(&pt).map_err(|e| e.to_string())
            }) {
                Ok(lines) => {
                    for line in lines {
                        let origin = line
                            .origin
                            .map(|s| format!(" origin={}", s.0))
                            .unwrap_or_default();
                        println!(
                            "    {} = {} @{}{origin}",
                            display_bytes(&line.entry.key),
                            display_bytes(&line.entry.value),
                            line.entry.lamport_ts,
                        );
                    }
                }
                Err(e) => println!("    payload unreadable with the given group key: {e}"),
            }
        }
    }
    println!("{} records, {} bad", records.len(), bad);
    Ok(if bad == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Quotes printable ASCII as text and falls back to hex for anything else.
fn display_bytes(b: &[u8]) -> String {
    if !b.is_empty() && b.iter().all(|&c| (0x20..0x7f).contains(&c)) {
        format!("\"{}\"", String::from_utf8_lossy(b))
    } else {
        format!("0x{}", hex::encode(b))
    }
}

fn run_db_levels(args: DbLevelsArgs) -> Result<ExitCode, String> {
    #[derive(Serialize)]
    struct LevelRow {
        level: usize,
        run_id: u64,
        entries: u64,
        blocks: usize,
        min_key: String,
        max_key: String,
    }
    #[derive(Serialize)]
    struct FrontierRow {
        sender: u64,
        ts: u64,
        head: String,
    }
    #[derive(Serialize)]
    struct Out {
        dir: String,
        checkpoint_seq: Option<u64>,
        checkpoint_fallbacks: u64,
        blocks_verified: u64,
        entries_total: u64,
        levels: Vec<LevelRow>,
        frontier: Vec<FrontierRow>,
    }

    let owner_seed = args
        .owner_seed
        .clone()
        .unwrap_or_else(|| format!("owner-seed-{}", args.seed));
    let sender = SenderId(args.sender);
    let prov = provision(owner_seed.as_bytes(), 0, &[sender]).map_err(|e| e.to_string())?;
    let bundle = &prov.workers[0];
    let (db, info) = CapsuleDb::open(
        &args.dir,
        DbKeys {
            sender,
            enc: at_rest_key(&bundle.group),
            signing: bundle.signing.clone(),
        },
        DbConfig::default(),
    )
    .map_err(|e| format!("{}: {e}", args.dir.display()))?;

    let levels: Vec<LevelRow> = db
        .level_info()
        .into_iter()
        .map(|r| LevelRow {
            level: r.level,
            run_id: r.id,
            entries: r.entries,
            blocks: r.blocks,
            min_key: display_bytes(&r.min_key),
            max_key: display_bytes(&r.max_key),
        })
        .collect();
    let frontier: Vec<FrontierRow> = db
        .frontier()
        .iter()
        .map(|(s, mark)| FrontierRow {
            sender: s.0,
            ts: mark.ts,
            head: hex::encode(mark.head.0),
        })
        .collect();
    let out = Out {
        dir: args.dir.display().to_string(),
        checkpoint_seq: info.checkpoint_seq,
        checkpoint_fallbacks: info.fallbacks,
        blocks_verified: info.blocks_verified,
        entries_total: levels.iter().map(|l| l.entries).sum(),
        levels,
        frontier,
    };
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(ExitCode::SUCCESS)
}
