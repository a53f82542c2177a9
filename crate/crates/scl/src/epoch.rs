//! Epoch-based resynchronization: the coordinator/worker protocol that
//! turns a lossy, unordered multicast of records into a converging
//! replicated store.
//!
//! Time is cut into epochs. Each epoch the coordinator multicasts an RTS
//! ("report your head"), every writer answers with an EoE record naming
//! the head of its chain, and the coordinator walks its own DAG from the
//! reported heads back to the previous epoch's boundary. Holes it finds
//! are pulled over with recovery request/response records (a bounded
//! number of rounds), and the epoch closes with a SYNC record whose
//! parents are the reported heads and whose payload is the full report
//! table. Workers adopt a validated SYNC as their new epoch: they stamp
//! subsequent records with its sequence number, parent their next DATA
//! record to it, run the same backtrack-and-recover walk against the
//! reported heads, and drop directly multicast DATA records that are more
//! than one epoch stale — resynchronization will carry those values if
//! they still matter.
//!
//! Writers that miss an epoch are carried forward: the coordinator
//! re-requests once mid-epoch, then reuses the writer's last known head
//! in the report, flagged, and marks the writer suspected until it is
//! heard from again. Shadow coordinators follow the SYNC stream as plain
//! replicas; if the stream goes silent long enough (staggered by shadow
//! rank so exactly one moves first) the shadow takes over from the last
//! sequence it saw. If two coordinators ever run at once, the one with
//! the lower sequence — or, on a tie, the higher id — demotes itself back
//! to shadowing.
//!
//! Every protocol message, control traffic included, is an encrypted and
//! signed capsule record; the only unencrypted bytes on the wire are the
//! envelope's addressing prefix. Point-to-point messages are addressed
//! envelopes on the same multicast tree (every node sees them; others
//! drop them by address), plus the tiny get/miss plumbing for the
//! spill-to-disk node.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use p256::ecdsa::SigningKey;
use thiserror::Error;

use crate::chain::{Chain, InsertOutcome};
use crate::keys::{compress, ExtendedPublicKey, KeyRegistry, WorkerBundle};
use crate::memtable::Memtable;
use crate::pipeline::{actor_step, ActorQueue, ControlItem, Sealer};
use crate::record::{
    decode_batch, open_record, verify_record, CapsuleRecord, KvEntry, MsgType, RecordHash,
    SenderId, SymmetricKey, Verdict,
};
use crate::simnet::{Ctx, SimNode};

// ---------------------------------------------------------------------------
// Wire plumbing: envelopes, client operations, and record payload formats.
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown tag byte {0}")]
    BadTag(u8),
    #[error("trailing bytes")]
    Trailing,
    #[error("embedded public key is invalid")]
    BadKey,
}

/// Minimal big-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn hash(&mut self) -> Result<RecordHash, CodecError> {
        Ok(RecordHash(self.bytes(32)?.try_into().unwrap()))
    }
    fn rest(self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
    fn finish(self) -> Result<(), CodecError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CodecError::Trailing)
        }
    }
}

const ADDR_BROADCAST: u64 = u64::MAX;

/// What an envelope carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    /// A capsule record in wire encoding.
    Record(Vec<u8>),
    /// Ask the spill node for a key it may hold.
    DbGet {
        req_id: u64,
        requester: SenderId,
        key: Vec<u8>,
    },
    /// The spill node does not hold the requested key.
    DbMiss { req_id: u64 },
}

/// Addressed unit on the multicast tree. `to: None` is a broadcast; an
/// addressed envelope still reaches everyone and non-addressees drop it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub to: Option<SenderId>,
    pub body: Body,
}

impl Envelope {
    pub fn record(record: &CapsuleRecord) -> Envelope {
        Envelope {
            to: None,
            body: Body::Record(record.to_bytes()),
        }
    }

    pub fn accepts(&self, me: SenderId) -> bool {
        self.to.map_or(true, |t| t == me)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.to.map_or(ADDR_BROADCAST, |s| s.0).to_be_bytes());
        match &self.body {
            Body::Record(bytes) => {
                out.push(0);
                out.extend_from_slice(bytes);
            }
            Body::DbGet {
                req_id,
                requester,
                key,
            } => {
                out.push(1);
                out.extend_from_slice(&req_id.to_be_bytes());
                out.extend_from_slice(&requester.0.to_be_bytes());
                out.extend_from_slice(&(key.len() as u32).to_be_bytes());
                out.extend_from_slice(key);
            }
            Body::DbMiss { req_id } => {
                out.push(2);
                out.extend_from_slice(&req_id.to_be_bytes());
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Envelope, CodecError> {
        let mut r = Reader::new(bytes);
        let addr = r.u64()?;
        let to = if addr == ADDR_BROADCAST {
            None
        } else {
            Some(SenderId(addr))
        };
        let tag = r.u8()?;
        let body = match tag {
            0 => Body::Record(r.rest().to_vec()),
            1 => {
                let req_id = r.u64()?;
                let requester = SenderId(r.u64()?);
                let len = r.u32()? as usize;
                let key = r.bytes(len)?.to_vec();
                r.finish()?;
                Body::DbGet {
                    req_id,
                    requester,
                    key,
                }
            }
            2 => {
                let req_id = r.u64()?;
                r.finish()?;
                Body::DbMiss { req_id }
            }
            other => return Err(CodecError::BadTag(other)),
        };
        Ok(Envelope { to, body })
    }
}

/// Operations the harness injects at a worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOp {
    Put { key: Vec<u8>, value: Vec<u8> },
    Get { key: Vec<u8> },
}

impl ClientOp {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ClientOp::Put { key, value } => {
                out.push(1);
                out.extend_from_slice(&(key.len() as u32).to_be_bytes());
                out.extend_from_slice(key);
                out.extend_from_slice(&(value.len() as u32).to_be_bytes());
                out.extend_from_slice(value);
            }
            ClientOp::Get { key } => {
                out.push(2);
                out.extend_from_slice(&(key.len() as u32).to_be_bytes());
                out.extend_from_slice(key);
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<ClientOp, CodecError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let op = match tag {
            1 => {
                let klen = r.u32()? as usize;
                let key = r.bytes(klen)?.to_vec();
                let vlen = r.u32()? as usize;
                let value = r.bytes(vlen)?.to_vec();
                r.finish()?;
                ClientOp::Put { key, value }
            }
            2 => {
                let klen = r.u32()? as usize;
                let key = r.bytes(klen)?.to_vec();
                r.finish()?;
                ClientOp::Get { key }
            }
            other => return Err(CodecError::BadTag(other)),
        };
        Ok(op)
    }
}

/// RTS payload: which epoch the coordinator is closing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtsPayload {
    pub closing_seq: u64,
}

impl RtsPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.closing_seq.to_be_bytes().to_vec()
    }
    pub fn parse(bytes: &[u8]) -> Result<RtsPayload, CodecError> {
        let mut r = Reader::new(bytes);
        let closing_seq = r.u64()?;
        r.finish()?;
        Ok(RtsPayload { closing_seq })
    }
}

/// EoE payload: one writer's report of its chain head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EoePayload {
    pub sender: SenderId,
    pub head: RecordHash,
    pub ts: u64,
    pub epoch: u64,
}

impl EoePayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56);
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        out.extend_from_slice(&self.head.0);
        out.extend_from_slice(&self.ts.to_be_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out
    }
    pub fn parse(bytes: &[u8]) -> Result<EoePayload, CodecError> {
        let mut r = Reader::new(bytes);
        let p = EoePayload {
            sender: SenderId(r.u64()?),
            head: r.hash()?,
            ts: r.u64()?,
            epoch: r.u64()?,
        };
        r.finish()?;
        Ok(p)
    }
}

/// One row of the SYNC report table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncEntry {
    pub sender: SenderId,
    pub head: RecordHash,
    pub ts: u64,
    /// The writer did not report this epoch; its previous head was reused.
    pub carried: bool,
}

/// SYNC payload: the sequence being opened, the application public key in
/// force for the *next* epoch, and the per-writer head table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncPayload {
    pub seq: u64,
    pub app_key: [u8; 33],
    pub entries: Vec<SyncEntry>,
}

impl SyncPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 1 + 33 + 4 + self.entries.len() * 49);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(33);
        out.extend_from_slice(&self.app_key);
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.sender.0.to_be_bytes());
            out.extend_from_slice(&e.head.0);
            out.extend_from_slice(&e.ts.to_be_bytes());
            out.push(e.carried as u8);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<SyncPayload, CodecError> {
        let mut r = Reader::new(bytes);
        let seq = r.u64()?;
        let klen = r.u8()? as usize;
        if klen != 33 {
            return Err(CodecError::BadKey);
        }
        let app_key: [u8; 33] = r.bytes(33)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(SyncEntry {
                sender: SenderId(r.u64()?),
                head: r.hash()?,
                ts: r.u64()?,
                carried: r.u8()? != 0,
            });
        }
        r.finish()?;
        Ok(SyncPayload {
            seq,
            app_key,
            entries,
        })
    }

    /// Deduplicated, sorted heads of the report — the SYNC's parents.
    pub fn heads(&self) -> Vec<RecordHash> {
        let set: BTreeSet<RecordHash> = self.entries.iter().map(|e| e.head).collect();
        set.into_iter().collect()
    }
}

/// Recovery request payload: the hashes the sender is missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReqPayload {
    pub hashes: Vec<RecordHash>,
}

impl RecoveryReqPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.hashes.len() * 32);
        out.extend_from_slice(&(self.hashes.len() as u32).to_be_bytes());
        for h in &self.hashes {
            out.extend_from_slice(&h.0);
        }
        out
    }
    pub fn parse(bytes: &[u8]) -> Result<RecoveryReqPayload, CodecError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()? as usize;
        let mut hashes = Vec::with_capacity(count);
        for _ in 0..count {
            hashes.push(r.hash()?);
        }
        r.finish()?;
        Ok(RecoveryReqPayload { hashes })
    }
}

// ---------------------------------------------------------------------------
// Timer tokens. Phase-scoped timers carry a generation in the high bits so
// a leftover timer from an abandoned phase is recognized and ignored.
// ---------------------------------------------------------------------------

pub const TOK_TICK: u64 = 1;
pub const TOK_STRAGGLER: u64 = 2;
pub const TOK_COLLECT_END: u64 = 3;
pub const TOK_RECOVERY: u64 = 4;
pub const TOK_ACTOR: u64 = 5;
pub const TOK_MONITOR: u64 = 6;
pub const TOK_GET: u64 = 7;
pub const TOK_DB_SERVICE: u64 = 8;

fn tok(kind: u64, gen: u64) -> u64 {
    kind | (gen << 8)
}
fn tok_kind(token: u64) -> u64 {
    token & 0xff
}
fn tok_gen(token: u64) -> u64 {
    token >> 8
}

// ---------------------------------------------------------------------------
// Shared configuration and per-era encryption keys.
// ---------------------------------------------------------------------------

/// Protocol timing and identity parameters shared by all roles.
#[derive(Debug, Clone)]
pub struct ProtoConfig {
    /// Epoch period in virtual microseconds.
    pub epoch_us: u64,
    /// Worker batching tick.
    pub actor_tick_us: u64,
    /// Entries per DATA record.
    pub batch_size: usize,
    /// Records this many epochs behind the current one are dropped when
    /// they arrive by direct multicast.
    pub freshness_window: u64,
    /// Recovery request rounds before giving up for the epoch.
    pub recovery_rounds: u32,
    /// Most records per recovery response: the requested hashes plus as
    /// much of their held ancestry as fits, so one response can close a
    /// lineage hole the requester cannot see past.
    pub recovery_batch: usize,
    /// How long a worker waits on the spill node before answering a get
    /// from local state alone.
    pub get_timeout_us: u64,
    /// Epochs of SYNC silence (plus one per shadow rank) before a shadow
    /// takes over.
    pub failover_epochs: u64,
    /// Virtual service time per lookup at the spill node. Zero answers
    /// inline; non-zero serves lookups one at a time through a FIFO
    /// queue, modeling the single store as the shared bottleneck it is.
    pub db_get_service_us: u64,
    /// Every identity allowed to seal RTS/SYNC records, primary first.
    pub coordinators: Vec<SenderId>,
    /// Writers that must answer each RTS.
    pub writers: Vec<SenderId>,
    /// The spill node, if the deployment has one.
    pub db: Option<SenderId>,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            epoch_us: 10_000,
            actor_tick_us: 500,
            batch_size: 8,
            freshness_window: 1,
            recovery_rounds: 3,
            recovery_batch: 64,
            get_timeout_us: 5_000,
            failover_epochs: 3,
            db_get_service_us: 0,
            coordinators: vec![SenderId(0)],
            writers: vec![],
            db: None,
        }
    }
}

/// Group encryption keys by era, mirroring the verify-key registry: the
/// era active at a record's epoch stamp decides which key opens it.
#[derive(Clone, Default)]
pub struct EncEras {
    eras: Vec<(u64, SymmetricKey)>,
}

impl EncEras {
    pub fn new(initial: SymmetricKey) -> EncEras {
        EncEras {
            eras: vec![(0, initial)],
        }
    }

    pub fn register(&mut self, start_epoch: u64, key: SymmetricKey) {
        match self.eras.binary_search_by_key(&start_epoch, |e| e.0) {
            Ok(i) => self.eras[i] = (start_epoch, key),
            Err(i) => self.eras.insert(i, (start_epoch, key)),
        }
    }

    pub fn at(&self, epoch_seq: u64) -> Option<&SymmetricKey> {
        match self.eras.binary_search_by_key(&epoch_seq, |e| e.0) {
            Ok(i) => Some(&self.eras[i].1),
            Err(0) => None,
            Err(i) => Some(&self.eras[i - 1].1),
        }
    }
}

// ---------------------------------------------------------------------------
// Worker.
// ---------------------------------------------------------------------------

/// How a client get was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GetSource {
    /// Key was in the memtable when the get arrived.
    Local,
    /// A record carrying the key arrived while the get was pending.
    Injected,
    /// The spill node answered that it has no such key.
    DbMiss,
    /// Nothing arrived before the deadline.
    Timeout,
}

/// Completed client get, for harness inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetOutcome {
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    pub issued_us: u64,
    pub completed_us: u64,
    pub source: GetSource,
}

#[derive(Debug, Clone, Default)]
pub struct WorkerStats {
    pub puts: u64,
    pub records_in: u64,
    pub dup_records: u64,
    pub stale_drops: u64,
    pub bad_records: u64,
    pub syncs_adopted: u64,
    pub recovery_rounds: u64,
    pub records_recovered: u64,
    pub recovery_responses_sent: u64,
    pub gets_issued: u64,
}

struct PendingGet {
    key: Vec<u8>,
    issued_us: u64,
}

/// Writer node: accepts client puts/gets, seals batched DATA records,
/// follows the epoch stream, and recovers records it missed.
pub struct Worker {
    cfg: ProtoConfig,
    sender: SenderId,
    sealer: Sealer,
    registry: KeyRegistry,
    enc: EncEras,
    chain: Chain,
    memtable: Memtable,
    queue: ActorQueue,
    current_epoch: u64,
    /// Heads reported by the last adopted SYNC: the stop set for the next
    /// validation backtrack.
    boundary: HashSet<RecordHash>,
    /// Hashes still being recovered, with the round counter.
    missing: BTreeSet<RecordHash>,
    recovery_round: u32,
    gen: u64,
    staged_rotation: Option<(u64, SigningKey)>,
    pending_gets: HashMap<u64, PendingGet>,
    next_req_id: u64,
    pub get_log: Vec<GetOutcome>,
    alive: bool,
    stats: WorkerStats,
}

impl Worker {
    pub fn new(bundle: WorkerBundle, cfg: ProtoConfig, seed: u64) -> Worker {
        let mut registry = KeyRegistry::new();
        registry.register(0, bundle.app_public.clone());
        let sealer = Sealer::new(
            bundle.sender,
            bundle.group.clone(),
            bundle.signing.clone(),
            seed ^ bundle.sender.0,
        );
        Worker {
            cfg,
            sender: bundle.sender,
            sealer,
            registry,
            enc: EncEras::new(bundle.group),
            chain: Chain::new(),
            memtable: Memtable::new(),
            queue: ActorQueue::new(),
            current_epoch: 0,
            boundary: [RecordHash::GENESIS].into_iter().collect(),
            missing: BTreeSet::new(),
            recovery_round: 0,
            gen: 0,
            staged_rotation: None,
            pending_gets: HashMap::new(),
            next_req_id: 0,
            get_log: Vec::new(),
            alive: true,
            stats: WorkerStats::default(),
        }
    }

    pub fn sender(&self) -> SenderId {
        self.sender
    }
    pub fn memtable(&self) -> &Memtable {
        &self.memtable
    }
    pub fn chain(&self) -> &Chain {
        &self.chain
    }
    pub fn current_epoch(&self) -> u64 {
        self.current_epoch
    }
    /// Hashes this worker knows it lacks and is still requesting.
    pub fn missing(&self) -> &BTreeSet<RecordHash> {
        &self.missing
    }
    pub fn stats(&self) -> &WorkerStats {
        &self.stats
    }
    pub fn set_alive(&mut self, alive: bool) {
        self.alive = alive;
    }
    pub fn registry_mut(&mut self) -> &mut KeyRegistry {
        &mut self.registry
    }

    /// Installs the next era's key material ahead of its effective epoch;
    /// the signing key swaps in when this worker's epoch reaches it.
    pub fn stage_rotation(&mut self, effective_epoch: u64, bundle: WorkerBundle) {
        self.registry.register(effective_epoch, bundle.app_public);
        self.enc.register(effective_epoch, bundle.group);
        self.staged_rotation = Some((effective_epoch, bundle.signing));
    }

    fn is_coordinator(&self, sender: SenderId) -> bool {
        self.cfg.coordinators.contains(&sender)
    }

    /// Seal and send everything the actor queue holds (all control, plus
    /// at most one DATA batch).
    fn flush_actor(&mut self, ctx: &mut Ctx<'_>) {
        let records = actor_step(&mut self.queue, &mut self.sealer, self.cfg.batch_size)
            .expect("sealing local batches cannot fail");
        for record in records {
            if record.header.msg_type == MsgType::Data {
                self.chain.insert(record.clone());
            }
            ctx.multicast(Envelope::record(&record).to_bytes());
        }
    }

    fn verify_incoming(&mut self, record: &CapsuleRecord) -> bool {
        let Some(dir) = self.registry.active_at(record.header.epoch_seq) else {
            self.stats.bad_records += 1;
            return false;
        };
        if verify_record(record, &dir.verify_key(record.header.sender)) != Verdict::Ok {
            self.stats.bad_records += 1;
            return false;
        }
        true
    }

    fn open_payload(&mut self, record: &CapsuleRecord) -> Option<Vec<u8>> {
        let Some(key) = self.enc.at(record.header.epoch_seq) else {
            self.stats.bad_records += 1;
            return None;
        };
        match open_record(record, key) {
            Ok(p) => Some(p),
            Err(_) => {
                self.stats.bad_records += 1;
                None
            }
        }
    }

    fn handle_data(&mut self, ctx: &mut Ctx<'_>, record: CapsuleRecord, recovered: bool) {
        // Freshness: a directly multicast record two or more epochs behind
        // is dropped; recovery responses are exempt (they are old by
        // construction — that is why they were requested).
        if !recovered
            && record.header.epoch_seq + self.cfg.freshness_window < self.current_epoch
        {
            self.stats.stale_drops += 1;
            return;
        }
        if self.chain.insert(record.clone()) == InsertOutcome::Duplicate {
            self.stats.dup_records += 1;
            return;
        }
        let Some(payload) = self.open_payload(&record) else {
            return;
        };
        let Ok(lines) = decode_batch(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        let mut touched: Vec<Vec<u8>> = Vec::new();
        for line in &lines {
            self.memtable.apply_line(line, record.header.sender);
            if !self.pending_gets.is_empty() {
                touched.push(line.entry.key.clone());
            }
        }
        for key in touched {
            self.complete_gets_for_key(ctx.now_us, &key, GetSource::Injected);
        }
    }

    fn complete_gets_for_key(&mut self, now_us: u64, key: &[u8], source: GetSource) {
        let ids: Vec<u64> = self
            .pending_gets
            .iter()
            .filter(|(_, g)| g.key == key)
            .map(|(&id, _)| id)
            .collect();
        for id in ids {
            let g = self.pending_gets.remove(&id).unwrap();
            let value = self.memtable.lookup(&g.key).map(|v| v.value.clone());
            self.get_log.push(GetOutcome {
                key: g.key,
                value,
                issued_us: g.issued_us,
                completed_us: now_us,
                source,
            });
        }
    }

    fn handle_rts(&mut self, ctx: &mut Ctx<'_>, record: &CapsuleRecord) {
        if !self.is_coordinator(record.header.sender) {
            self.stats.bad_records += 1;
            return;
        }
        // Report our chain head. A writer with no DATA this epoch reports
        // the boundary record it adopted last, which is what `head` decays
        // to at each SYNC.
        let payload = EoePayload {
            sender: self.sender,
            head: self.sealer.head(),
            ts: self.memtable.local_sn(),
            epoch: self.current_epoch,
        };
        self.queue.push_control(ControlItem {
            msg_type: MsgType::Eoe,
            lamport_ts: self.memtable.local_sn(),
            prev_hashes: vec![],
            payload: payload.to_bytes(),
        });
        self.flush_actor(ctx);
    }

    fn handle_sync(&mut self, ctx: &mut Ctx<'_>, record: CapsuleRecord) {
        if !self.is_coordinator(record.header.sender) {
            self.stats.bad_records += 1;
            return;
        }
        let Some(payload) = self.open_payload(&record) else {
            return;
        };
        let Ok(report) = SyncPayload::parse(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        if report.seq <= self.current_epoch {
            return; // replay or late duplicate of an epoch already adopted
        }
        self.chain.insert(record.clone());
        self.stats.syncs_adopted += 1;
        self.current_epoch = report.seq;
        self.sealer.set_epoch_seq(report.seq);
        // Re-anchor the data chain onto the SYNC only if the report
        // actually binds our current head (the SYNC prev-links every bound
        // head, so anchoring keeps our lineage reachable). Anything else —
        // records sealed in the report window, or a report our EoE never
        // reached — keeps its own lineage, or it would be orphaned from
        // every future reported head and unrecoverable.
        let heads = report.heads();
        let head = self.sealer.head();
        if heads.contains(&head) {
            self.sealer.set_head(record.record_hash);
        }
        if let Some(key) = self.enc.at(report.seq) {
            self.sealer.set_enc_key(key.clone());
        }

        // Swap our own signing key once its staged era is in force. The
        // announced application key in the report is audit material: only
        // the chain code (provisioned out of band) makes it derivable, so
        // an announcement alone cannot install an era.
        if let Some((effective, _)) = self.staged_rotation {
            if self.current_epoch >= effective {
                let (_, key) = self.staged_rotation.take().unwrap();
                self.sealer.set_signing_key(key);
            }
        }

        // Validate: walk from the reported heads back to the previous
        // boundary; anything we do not hold gets requested. Holes left
        // over from earlier epochs stay on the list — the boundary moves
        // past them, so this is their only road to recovery.
        let walk = self.chain.backtrack(&heads, &self.boundary);
        self.boundary = heads.into_iter().collect();
        self.missing.extend(walk.missing);
        self.missing.retain(|h| !self.chain.contains(h));
        self.gen += 1;
        if !self.missing.is_empty() {
            self.recovery_round = 1;
            self.send_recovery_req(ctx);
            ctx.set_timer(self.cfg.epoch_us / 8, tok(TOK_RECOVERY, self.gen));
        }
    }

    fn send_recovery_req(&mut self, ctx: &mut Ctx<'_>) {
        self.stats.recovery_rounds += 1;
        let payload = RecoveryReqPayload {
            hashes: self.missing.iter().copied().collect(),
        };
        let record = self
            .sealer
            .seal_control(
                MsgType::RecoveryReq,
                self.memtable.local_sn(),
                vec![],
                &payload.to_bytes(),
            )
            .expect("control sealing cannot fail");
        ctx.multicast(Envelope::record(&record).to_bytes());
    }

    fn handle_recovery_req(&mut self, ctx: &mut Ctx<'_>, record: &CapsuleRecord) {
        let Some(payload) = self.open_payload(record) else {
            return;
        };
        let Ok(req) = RecoveryReqPayload::parse(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        let held = self.chain.ancestry(&req.hashes, self.cfg.recovery_batch);
        if held.is_empty() {
            return;
        }
        self.stats.recovery_responses_sent += 1;
        let resp = self
            .sealer
            .seal_control(
                MsgType::RecoveryResp,
                self.memtable.local_sn(),
                vec![],
                &held.to_bytes(),
            )
            .expect("control sealing cannot fail");
        ctx.multicast(Envelope::record(&resp).to_bytes());
    }

    fn handle_recovery_resp(&mut self, ctx: &mut Ctx<'_>, record: &CapsuleRecord) {
        let Some(payload) = self.open_payload(record) else {
            return;
        };
        let Ok(recovered) = Chain::from_bytes(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        let mut new_holes = false;
        for r in recovered.iter() {
            // Held records were verified when first inserted, and their
            // parents have been closed over already; skip the signature.
            if self.chain.contains(&r.record_hash) {
                self.missing.remove(&r.record_hash);
                continue;
            }
            if !self.verify_incoming(r) {
                continue;
            }
            let was_missing = self.missing.remove(&r.record_hash);
            match r.header.msg_type {
                MsgType::Data => {
                    self.handle_data(ctx, r.clone(), true);
                    if was_missing {
                        self.stats.records_recovered += 1;
                    }
                }
                MsgType::Sync => {
                    // Boundary records recovered for link completeness only.
                    if self.chain.insert(r.clone()) == InsertOutcome::Inserted && was_missing {
                        self.stats.records_recovered += 1;
                    }
                }
                _ => {}
            }
            // Transitive closure: a recovered record can prev-link records
            // we also lack, and the boundary walks have already moved past
            // it — this is the only place such holes can surface.
            for p in &r.header.prev_hashes {
                if *p != RecordHash::GENESIS && !self.chain.contains(p) && self.missing.insert(*p)
                {
                    new_holes = true;
                }
            }
        }
        self.missing.retain(|h| !self.chain.contains(h));
        if new_holes && !self.missing.is_empty() {
            self.send_recovery_req(ctx);
        }
    }

    fn handle_db_miss(&mut self, now_us: u64, req_id: u64) {
        if let Some(g) = self.pending_gets.remove(&req_id) {
            let value = self.memtable.lookup(&g.key).map(|v| v.value.clone());
            self.get_log.push(GetOutcome {
                key: g.key,
                value,
                issued_us: g.issued_us,
                completed_us: now_us,
                source: GetSource::DbMiss,
            });
        }
    }
}

impl SimNode for Worker {
    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &[u8]) {
        if !self.alive {
            return;
        }
        let Ok(envelope) = Envelope::parse(msg) else {
            self.stats.bad_records += 1;
            return;
        };
        if !envelope.accepts(self.sender) {
            return;
        }
        match envelope.body {
            Body::Record(bytes) => {
                let Ok(record) = CapsuleRecord::from_bytes(&bytes) else {
                    self.stats.bad_records += 1;
                    return;
                };
                self.stats.records_in += 1;
                if !self.verify_incoming(&record) {
                    return;
                }
                match record.header.msg_type {
                    MsgType::Data => self.handle_data(ctx, record, false),
                    MsgType::Rts => self.handle_rts(ctx, &record),
                    MsgType::Sync => self.handle_sync(ctx, record),
                    MsgType::RecoveryReq => self.handle_recovery_req(ctx, &record),
                    MsgType::RecoveryResp => self.handle_recovery_resp(ctx, &record),
                    MsgType::Eoe => {} // coordinator traffic, not ours
                }
            }
            Body::DbGet { .. } => {} // spill-node traffic, not ours
            Body::DbMiss { req_id } => self.handle_db_miss(ctx.now_us, req_id),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        if !self.alive {
            return;
        }
        match tok_kind(token) {
            TOK_ACTOR => {
                self.flush_actor(ctx);
                ctx.set_timer(self.cfg.actor_tick_us, tok(TOK_ACTOR, 0));
            }
            TOK_RECOVERY => {
                if tok_gen(token) != self.gen || self.missing.is_empty() {
                    return;
                }
                if self.recovery_round < self.cfg.recovery_rounds {
                    self.recovery_round += 1;
                    self.send_recovery_req(ctx);
                    ctx.set_timer(self.cfg.epoch_us / 8, tok(TOK_RECOVERY, self.gen));
                }
                // Budget exhausted: leave the holes; the next epoch's walk
                // will rediscover anything that still matters.
            }
            TOK_GET => {
                let req_id = tok_gen(token);
                if let Some(g) = self.pending_gets.remove(&req_id) {
                    let value = self.memtable.lookup(&g.key).map(|v| v.value.clone());
                    self.get_log.push(GetOutcome {
                        key: g.key,
                        value,
                        issued_us: g.issued_us,
                        completed_us: ctx.now_us,
                        source: GetSource::Timeout,
                    });
                }
            }
            _ => {}
        }
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, op: &[u8]) {
        if !self.alive {
            return;
        }
        let Ok(op) = ClientOp::parse(op) else {
            return;
        };
        match op {
            ClientOp::Put { key, value } => {
                self.stats.puts += 1;
                let entry = KvEntry {
                    key,
                    value,
                    lamport_ts: self.memtable.next_local_ts(),
                };
                self.memtable.apply(&entry, self.sender);
                self.queue.push_data(entry);
            }
            ClientOp::Get { key } => {
                self.stats.gets_issued += 1;
                if let Some(v) = self.memtable.lookup(&key) {
                    let value = Some(v.value.clone());
                    self.get_log.push(GetOutcome {
                        key,
                        value,
                        issued_us: ctx.now_us,
                        completed_us: ctx.now_us,
                        source: GetSource::Local,
                    });
                    return;
                }
                match self.cfg.db {
                    Some(db) => {
                        let req_id = self.next_req_id;
                        self.next_req_id += 1;
                        self.pending_gets.insert(
                            req_id,
                            PendingGet {
                                key: key.clone(),
                                issued_us: ctx.now_us,
                            },
                        );
                        ctx.multicast(
                            Envelope {
                                to: Some(db),
                                body: Body::DbGet {
                                    req_id,
                                    requester: self.sender,
                                    key,
                                },
                            }
                            .to_bytes(),
                        );
                        ctx.set_timer(self.cfg.get_timeout_us, tok(TOK_GET, req_id));
                    }
                    None => {
                        // No spill tier: a miss is final immediately.
                        self.get_log.push(GetOutcome {
                            key,
                            value: None,
                            issued_us: ctx.now_us,
                            completed_us: ctx.now_us,
                            source: GetSource::Timeout,
                        });
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Coordinator (active or shadow).
// ---------------------------------------------------------------------------

/// Whether this node currently drives epochs or monitors them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Active,
    Shadow { rank: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Collecting,
    Recovering { round: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct CoordStats {
    pub epochs_sealed: u64,
    pub eoes_received: u64,
    pub rts_resends: u64,
    pub carried_entries: u64,
    pub recovery_rounds: u64,
    pub records_recovered: u64,
    pub unrecovered: u64,
    pub records_in: u64,
    pub stale_drops: u64,
    pub bad_records: u64,
    pub activations: u64,
    pub demotions: u64,
}

/// Epoch driver and full replica. A shadow is the same machine with the
/// driving half parked.
pub struct Coordinator {
    cfg: ProtoConfig,
    sender: SenderId,
    sealer: Sealer,
    registry: KeyRegistry,
    enc: EncEras,
    chain: Chain,
    memtable: Memtable,
    role: Role,
    phase: Phase,
    gen: u64,
    current_seq: u64,
    boundary: HashSet<RecordHash>,
    reported: BTreeMap<SenderId, (RecordHash, u64)>,
    last_heads: BTreeMap<SenderId, (RecordHash, u64)>,
    pending_entries: Vec<SyncEntry>,
    pending_heads: Vec<RecordHash>,
    missing: BTreeSet<RecordHash>,
    pub suspected: BTreeSet<SenderId>,
    pending_tick: bool,
    resent: bool,
    last_sync_us: u64,
    staged_rotation: Option<(u64, SigningKey)>,
    /// The report table of the last SYNC this node sealed.
    pub last_report: Option<SyncPayload>,
    alive: bool,
    stats: CoordStats,
}

impl Coordinator {
    pub fn new(bundle: WorkerBundle, role: Role, cfg: ProtoConfig, seed: u64) -> Coordinator {
        let mut registry = KeyRegistry::new();
        registry.register(0, bundle.app_public.clone());
        let sealer = Sealer::new(
            bundle.sender,
            bundle.group.clone(),
            bundle.signing.clone(),
            seed ^ bundle.sender.0,
        );
        Coordinator {
            cfg,
            sender: bundle.sender,
            sealer,
            registry,
            enc: EncEras::new(bundle.group),
            chain: Chain::new(),
            memtable: Memtable::new(),
            role,
            phase: Phase::Idle,
            gen: 0,
            current_seq: 0,
            boundary: [RecordHash::GENESIS].into_iter().collect(),
            reported: BTreeMap::new(),
            last_heads: BTreeMap::new(),
            pending_entries: Vec::new(),
            pending_heads: Vec::new(),
            missing: BTreeSet::new(),
            suspected: BTreeSet::new(),
            pending_tick: false,
            resent: false,
            last_sync_us: 0,
            staged_rotation: None,
            last_report: None,
            alive: true,
            stats: CoordStats::default(),
        }
    }

    pub fn sender(&self) -> SenderId {
        self.sender
    }
    pub fn memtable(&self) -> &Memtable {
        &self.memtable
    }
    pub fn chain(&self) -> &Chain {
        &self.chain
    }
    pub fn current_seq(&self) -> u64 {
        self.current_seq
    }
    pub fn role(&self) -> Role {
        self.role
    }
    /// Hashes this coordinator knows it lacks and is still requesting.
    pub fn missing(&self) -> &BTreeSet<RecordHash> {
        &self.missing
    }
    pub fn stats(&self) -> &CoordStats {
        &self.stats
    }
    pub fn set_alive(&mut self, alive: bool) {
        self.alive = alive;
    }
    pub fn registry_mut(&mut self) -> &mut KeyRegistry {
        &mut self.registry
    }

    /// Installs the next era ahead of time; the coordinator switches keys
    /// when it seals the first record stamped at or past the effective
    /// epoch, and announces the new application key one SYNC earlier.
    pub fn stage_rotation(
        &mut self,
        effective_epoch: u64,
        own_signing: SigningKey,
        app_public: ExtendedPublicKey,
        group: SymmetricKey,
    ) {
        self.registry.register(effective_epoch, app_public);
        self.enc.register(effective_epoch, group);
        self.staged_rotation = Some((effective_epoch, own_signing));
    }

    fn my_shadow_rank(&self) -> u32 {
        let mut shadows: Vec<SenderId> = self
            .cfg
            .coordinators
            .iter()
            .copied()
            .filter(|&s| s != self.cfg.coordinators[0])
            .collect();
        shadows.sort();
        shadows
            .iter()
            .position(|&s| s == self.sender)
            .unwrap_or(shadows.len()) as u32
    }

    fn verify_incoming(&mut self, record: &CapsuleRecord) -> bool {
        let Some(dir) = self.registry.active_at(record.header.epoch_seq) else {
            self.stats.bad_records += 1;
            return false;
        };
        if verify_record(record, &dir.verify_key(record.header.sender)) != Verdict::Ok {
            self.stats.bad_records += 1;
            return false;
        }
        true
    }

    fn open_payload(&mut self, record: &CapsuleRecord) -> Option<Vec<u8>> {
        let Some(key) = self.enc.at(record.header.epoch_seq) else {
            self.stats.bad_records += 1;
            return None;
        };
        match open_record(record, key) {
            Ok(p) => Some(p),
            Err(_) => {
                self.stats.bad_records += 1;
                None
            }
        }
    }

    fn start_epoch(&mut self, ctx: &mut Ctx<'_>) {
        self.phase = Phase::Collecting;
        self.gen += 1;
        self.resent = false;
        self.reported.clear();
        let rts = self
            .sealer
            .seal_control(
                MsgType::Rts,
                self.memtable.local_sn(),
                vec![],
                &RtsPayload {
                    closing_seq: self.current_seq,
                }
                .to_bytes(),
            )
            .expect("control sealing cannot fail");
        ctx.multicast(Envelope::record(&rts).to_bytes());
        ctx.set_timer(self.cfg.epoch_us / 2, tok(TOK_STRAGGLER, self.gen));
        ctx.set_timer(self.cfg.epoch_us * 3 / 4, tok(TOK_COLLECT_END, self.gen));
    }

    fn handle_eoe(&mut self, ctx: &mut Ctx<'_>, record: &CapsuleRecord) {
        if self.role != Role::Active || self.phase != Phase::Collecting {
            return;
        }
        let Some(payload) = self.open_payload(record) else {
            return;
        };
        let Ok(eoe) = EoePayload::parse(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        if eoe.sender != record.header.sender || !self.cfg.writers.contains(&eoe.sender) {
            self.stats.bad_records += 1;
            return;
        }
        self.stats.eoes_received += 1;
        let entry = self.reported.entry(eoe.sender).or_insert((eoe.head, eoe.ts));
        if eoe.ts >= entry.1 {
            *entry = (eoe.head, eoe.ts);
        }
        if self.reported.len() == self.cfg.writers.len() {
            self.finalize_collection();
            self.continue_after_collection(ctx);
        }
    }

    /// Freeze the report table (carrying forward silent writers) and start
    /// recovering anything the backtrack cannot reach.
    fn finalize_collection(&mut self) {
        if self.phase != Phase::Collecting {
            return;
        }
        let mut entries = Vec::with_capacity(self.cfg.writers.len());
        let writers = self.cfg.writers.clone();
        for w in writers {
            match self.reported.get(&w) {
                Some(&(head, ts)) => {
                    self.suspected.remove(&w);
                    self.last_heads.insert(w, (head, ts));
                    entries.push(SyncEntry {
                        sender: w,
                        head,
                        ts,
                        carried: false,
                    });
                }
                None => {
                    let (head, ts) = self
                        .last_heads
                        .get(&w)
                        .copied()
                        .unwrap_or((RecordHash::GENESIS, 0));
                    self.suspected.insert(w);
                    self.stats.carried_entries += 1;
                    entries.push(SyncEntry {
                        sender: w,
                        head,
                        ts,
                        carried: true,
                    });
                }
            }
        }
        let head_set: BTreeSet<RecordHash> = entries.iter().map(|e| e.head).collect();
        self.pending_heads = head_set.into_iter().collect();
        self.pending_entries = entries;
        // Holes from earlier epochs stay on the list: the boundary has
        // moved past them, so no later walk will rediscover them.
        let walk = self.chain.backtrack(&self.pending_heads, &self.boundary);
        self.missing.extend(walk.missing);
        self.missing.retain(|h| !self.chain.contains(h));
        self.gen += 1;
        if self.missing.is_empty() {
            self.phase = Phase::Recovering { round: 0 }; // nothing to pull
        } else {
            self.phase = Phase::Recovering { round: 1 };
        }
    }

    fn continue_after_collection(&mut self, ctx: &mut Ctx<'_>) {
        match self.phase {
            Phase::Recovering { round: 0 } => self.seal_sync(ctx),
            Phase::Recovering { round: 1 } => {
                self.send_recovery_req(ctx);
                ctx.set_timer(self.cfg.epoch_us / 8, tok(TOK_RECOVERY, self.gen));
            }
            _ => {}
        }
    }

    fn send_recovery_req(&mut self, ctx: &mut Ctx<'_>) {
        self.stats.recovery_rounds += 1;
        let payload = RecoveryReqPayload {
            hashes: self.missing.iter().copied().collect(),
        };
        let record = self
            .sealer
            .seal_control(
                MsgType::RecoveryReq,
                self.memtable.local_sn(),
                vec![],
                &payload.to_bytes(),
            )
            .expect("control sealing cannot fail");
        ctx.multicast(Envelope::record(&record).to_bytes());
    }

    fn seal_sync(&mut self, ctx: &mut Ctx<'_>) {
        let new_seq = self.current_seq + 1;
        // A staged rotation takes effect with the first record stamped at
        // its epoch — which is this SYNC, if the time has come.
        if let Some((effective, _)) = self.staged_rotation {
            if new_seq >= effective {
                let (_, key) = self.staged_rotation.take().unwrap();
                self.sealer.set_signing_key(key);
            }
        }
        if let Some(key) = self.enc.at(new_seq) {
            self.sealer.set_enc_key(key.clone());
        }
        self.sealer.set_epoch_seq(new_seq);
        let announced = self
            .registry
            .active_at(new_seq + 1)
            .map(|d| compress(&d.app_public().verifying_key()))
            .expect("era 0 always registered");
        let payload = SyncPayload {
            seq: new_seq,
            app_key: announced,
            entries: std::mem::take(&mut self.pending_entries),
        };
        let mut prevs = payload.heads();
        if prevs.is_empty() {
            prevs.push(RecordHash::GENESIS);
        }
        let record = self
            .sealer
            .seal_control(
                MsgType::Sync,
                self.memtable.local_sn(),
                prevs,
                &payload.to_bytes(),
            )
            .expect("control sealing cannot fail");
        self.chain.insert(record.clone());
        ctx.multicast(Envelope::record(&record).to_bytes());

        self.boundary = payload.heads().into_iter().collect();
        self.current_seq = new_seq;
        self.sealer.set_head(record.record_hash);
        self.last_sync_us = ctx.now_us;
        self.last_report = Some(payload);
        self.stats.epochs_sealed += 1;
        self.phase = Phase::Idle;
        self.gen += 1;
        if self.pending_tick {
            self.pending_tick = false;
            self.start_epoch(ctx);
        }
    }

    /// A SYNC sealed by someone else: adopt it as a replica, and resolve
    /// leadership if we are (or thought we were) active.
    fn handle_foreign_sync(&mut self, ctx: &mut Ctx<'_>, record: CapsuleRecord) {
        let Some(payload) = self.open_payload(&record) else {
            return;
        };
        let Ok(report) = SyncPayload::parse(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        let their = record.header.sender;
        if self.role == Role::Active {
            let i_lose = report.seq > self.current_seq
                || (report.seq == self.current_seq && self.sender.0 > their.0);
            if i_lose {
                self.stats.demotions += 1;
                self.role = Role::Shadow {
                    rank: self.my_shadow_rank(),
                };
                self.phase = Phase::Idle;
                self.pending_tick = false;
                self.gen += 1;
                ctx.set_timer(self.cfg.epoch_us, tok(TOK_MONITOR, 0));
            } else {
                return; // they will demote when they see our stream
            }
        }
        if report.seq <= self.current_seq {
            return;
        }
        self.chain.insert(record.clone());
        self.current_seq = report.seq;
        self.sealer.set_epoch_seq(report.seq);
        self.sealer.set_head(record.record_hash);
        if let Some(key) = self.enc.at(report.seq) {
            self.sealer.set_enc_key(key.clone());
        }
        if let Some((effective, _)) = self.staged_rotation {
            if report.seq + 1 >= effective {
                let (_, key) = self.staged_rotation.take().unwrap();
                self.sealer.set_signing_key(key);
            }
        }
        self.last_sync_us = ctx.now_us;
        for e in &report.entries {
            self.last_heads.insert(e.sender, (e.head, e.ts));
        }
        let heads = report.heads();
        let walk = self.chain.backtrack(&heads, &self.boundary);
        self.boundary = heads.into_iter().collect();
        self.missing.extend(walk.missing);
        self.missing.retain(|h| !self.chain.contains(h));
        self.gen += 1;
        if !self.missing.is_empty() {
            // Shadow-side recovery keeps this replica ready to take over.
            self.send_recovery_req(ctx);
            ctx.set_timer(self.cfg.epoch_us / 8, tok(TOK_RECOVERY, self.gen));
        }
    }

    fn handle_data(&mut self, record: CapsuleRecord, recovered: bool) {
        if !recovered
            && record.header.epoch_seq + self.cfg.freshness_window < self.current_seq
        {
            self.stats.stale_drops += 1;
            return;
        }
        if self.chain.insert(record.clone()) == InsertOutcome::Duplicate {
            return;
        }
        let Some(payload) = self.open_payload(&record) else {
            return;
        };
        let Ok(lines) = decode_batch(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        for line in &lines {
            self.memtable.apply_line(line, record.header.sender);
        }
    }

    fn handle_recovery_resp(&mut self, ctx: &mut Ctx<'_>, record: &CapsuleRecord) {
        let Some(payload) = self.open_payload(record) else {
            return;
        };
        let Ok(recovered) = Chain::from_bytes(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        let mut new_holes = false;
        for r in recovered.iter() {
            // Held records were verified when first inserted, and their
            // parents have been closed over already; skip the signature.
            if self.chain.contains(&r.record_hash) {
                self.missing.remove(&r.record_hash);
                continue;
            }
            if !self.verify_incoming(r) {
                continue;
            }
            let was_missing = self.missing.remove(&r.record_hash);
            match r.header.msg_type {
                MsgType::Data => self.handle_data(r.clone(), true),
                MsgType::Sync => {
                    self.chain.insert(r.clone());
                }
                _ => continue,
            }
            if was_missing {
                self.stats.records_recovered += 1;
            }
            // Transitive closure over parents we still lack; the boundary
            // walks have moved past this record already.
            for p in &r.header.prev_hashes {
                if *p != RecordHash::GENESIS && !self.chain.contains(p) && self.missing.insert(*p)
                {
                    new_holes = true;
                }
            }
        }
        // Recovered links may expose deeper holes; re-walk before closing.
        if matches!(self.phase, Phase::Recovering { .. }) && self.role == Role::Active {
            let walk = self.chain.backtrack(&self.pending_heads, &self.boundary);
            self.missing.extend(walk.missing);
            self.missing
                .retain(|h| !self.chain.contains(h) && *h != RecordHash::GENESIS);
            if self.missing.is_empty() {
                self.seal_sync(ctx);
            } else if new_holes {
                self.send_recovery_req(ctx);
            }
        } else {
            self.missing.retain(|h| !self.chain.contains(h));
            if new_holes && !self.missing.is_empty() {
                self.send_recovery_req(ctx);
            }
        }
    }

    fn handle_recovery_req(&mut self, ctx: &mut Ctx<'_>, record: &CapsuleRecord) {
        let Some(payload) = self.open_payload(record) else {
            return;
        };
        let Ok(req) = RecoveryReqPayload::parse(&payload) else {
            self.stats.bad_records += 1;
            return;
        };
        let held = self.chain.ancestry(&req.hashes, self.cfg.recovery_batch);
        if held.is_empty() {
            return;
        }
        let resp = self
            .sealer
            .seal_control(
                MsgType::RecoveryResp,
                self.memtable.local_sn(),
                vec![],
                &held.to_bytes(),
            )
            .expect("control sealing cannot fail");
        ctx.multicast(Envelope::record(&resp).to_bytes());
    }
}

impl SimNode for Coordinator {
    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &[u8]) {
        if !self.alive {
            return;
        }
        let Ok(envelope) = Envelope::parse(msg) else {
            self.stats.bad_records += 1;
            return;
        };
        if !envelope.accepts(self.sender) {
            return;
        }
        let Body::Record(bytes) = envelope.body else {
            return; // get/miss plumbing is worker/spill traffic
        };
        let Ok(record) = CapsuleRecord::from_bytes(&bytes) else {
            self.stats.bad_records += 1;
            return;
        };
        self.stats.records_in += 1;
        if !self.verify_incoming(&record) {
            return;
        }
        match record.header.msg_type {
            MsgType::Data => self.handle_data(record, false),
            MsgType::Eoe => self.handle_eoe(ctx, &record),
            MsgType::Sync => self.handle_foreign_sync(ctx, record),
            MsgType::RecoveryReq => self.handle_recovery_req(ctx, &record),
            MsgType::RecoveryResp => self.handle_recovery_resp(ctx, &record),
            MsgType::Rts => {} // only coordinators send these; nothing to do
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        if !self.alive {
            return;
        }
        match tok_kind(token) {
            TOK_TICK => {
                if self.role != Role::Active {
                    return; // demoted: the cadence dies with the role
                }
                ctx.set_timer(self.cfg.epoch_us, tok(TOK_TICK, 0));
                match self.phase {
                    Phase::Idle => self.start_epoch(ctx),
                    _ => self.pending_tick = true,
                }
            }
            TOK_STRAGGLER => {
                if tok_gen(token) != self.gen || self.phase != Phase::Collecting || self.resent {
                    return;
                }
                if self.reported.len() < self.cfg.writers.len() {
                    self.resent = true;
                    self.stats.rts_resends += 1;
                    let rts = self
                        .sealer
                        .seal_control(
                            MsgType::Rts,
                            self.memtable.local_sn(),
                            vec![],
                            &RtsPayload {
                                closing_seq: self.current_seq,
                            }
                            .to_bytes(),
                        )
                        .expect("control sealing cannot fail");
                    ctx.multicast(Envelope::record(&rts).to_bytes());
                }
            }
            TOK_COLLECT_END => {
                if tok_gen(token) != self.gen || self.phase != Phase::Collecting {
                    return;
                }
                self.finalize_collection();
                self.continue_after_collection(ctx);
            }
            TOK_RECOVERY => {
                if tok_gen(token) != self.gen {
                    return;
                }
                if self.role == Role::Active {
                    let Phase::Recovering { round } = self.phase else {
                        return;
                    };
                    self.missing.retain(|h| !self.chain.contains(h));
                    if self.missing.is_empty() {
                        self.seal_sync(ctx);
                    } else if round < self.cfg.recovery_rounds {
                        self.phase = Phase::Recovering { round: round + 1 };
                        self.send_recovery_req(ctx);
                        ctx.set_timer(self.cfg.epoch_us / 8, tok(TOK_RECOVERY, self.gen));
                    } else {
                        // Budget spent: seal anyway and keep the holes on
                        // the list for next epoch's rounds.
                        self.stats.unrecovered = self.missing.len() as u64;
                        self.seal_sync(ctx);
                    }
                } else if !self.missing.is_empty() {
                    // Shadow-side retries, bounded by the same budget.
                    self.missing.retain(|h| !self.chain.contains(h));
                    if !self.missing.is_empty() {
                        self.send_recovery_req(ctx);
                    }
                }
            }
            TOK_MONITOR => {
                let Role::Shadow { rank } = self.role else {
                    return;
                };
                ctx.set_timer(self.cfg.epoch_us, tok(TOK_MONITOR, 0));
                let silence = ctx.now_us.saturating_sub(self.last_sync_us);
                let threshold = (self.cfg.failover_epochs + rank as u64) * self.cfg.epoch_us;
                if silence > threshold {
                    self.stats.activations += 1;
                    self.role = Role::Active;
                    self.phase = Phase::Idle;
                    self.start_epoch(ctx);
                    ctx.set_timer(self.cfg.epoch_us, tok(TOK_TICK, 0));
                }
            }
            _ => {}
        }
    }

    fn on_client(&mut self, _ctx: &mut Ctx<'_>, _op: &[u8]) {
        // Coordinators do not take client traffic.
    }
}
