//! Write-quorum durability for sealed records.
//!
//! A group of `n = 2f + 1` replicas answers a commit with an ack after a
//! record is on its disk; the write is durable once `w = f + 1` replicas
//! have acked, because any `f` crashes still leave one acked copy alive.
//! Replicas are append-only logs of length-prefixed record frames with an
//! in-memory hash index rebuilt on open, so re-committing a record a
//! replica already holds acks without writing a second frame.
//!
//! The group is deliberately synchronous: a commit offers the record to
//! every replica in turn and reports exactly how many acks it gathered.
//! There is no background repair; a replica that was down during commits
//! catches up explicitly through [`ReplicaGroup::recover`], which pulls
//! the records its peers hold that it lacks. Recovery is a set union, so
//! replicas converge no matter how their outage windows interleaved.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::record::{append_frame, split_frames, CapsuleRecord, RecordHash};

#[derive(Debug, Error)]
pub enum ReplError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no such replica: {0}")]
    NoSuchReplica(usize),
}

/// Acks needed for durability in a group of `n` replicas: a majority,
/// `f + 1` where `f = (n - 1) / 2` is the crash budget.
pub fn write_quorum(n: usize) -> usize {
    n / 2 + 1
}

/// How one replica answered an offer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    /// Appended and flushed; acked.
    Stored,
    /// Already held; acked without a second frame.
    AlreadyHeld,
    /// Stored but the ack never came back.
    NoAck,
    /// Crashed; nothing stored.
    Down,
}

/// One replica: an append-only frame log plus the index rebuilt from it.
pub struct Replica {
    path: PathBuf,
    file: fs::File,
    held: HashSet<RecordHash>,
    records: HashMap<RecordHash, CapsuleRecord>,
    /// fsync before acking. Turning this off trades the durability
    /// guarantee for speed; only benchmarks should.
    fsync: bool,
    down: bool,
    /// Stores but never acks, like a replica cut off on the return path.
    mute: bool,
}

impl Replica {
    /// Opens (or creates) the log at `path`, truncating any torn tail so
    /// future appends extend the valid prefix.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> Result<Replica, ReplError> {
        let path = path.as_ref().to_path_buf();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let parsed = split_frames(&bytes);
        let consumed: u64 = parsed.iter().map(|r| 4 + r.to_bytes().len() as u64).sum();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        if consumed < bytes.len() as u64 {
            file.set_len(consumed)?;
        }
        let mut held = HashSet::new();
        let mut records = HashMap::new();
        for r in parsed {
            held.insert(r.record_hash);
            records.insert(r.record_hash, r);
        }
        Ok(Replica {
            path,
            file,
            held,
            records,
            fsync,
            down: false,
            mute: false,
        })
    }

    pub fn holds(&self, hash: &RecordHash) -> bool {
        !self.down && self.held.contains(hash)
    }

    pub fn is_down(&self) -> bool {
        self.down
    }

    pub fn record_count(&self) -> usize {
        self.held.len()
    }

    /// Hashes held, for diffing. Empty while down.
    pub fn held_set(&self) -> HashSet<RecordHash> {
        if self.down {
            return HashSet::new();
        }
        self.held.clone()
    }

    fn fetch(&self, hash: &RecordHash) -> Option<&CapsuleRecord> {
        if self.down {
            return None;
        }
        self.records.get(hash)
    }

    fn offer(&mut self, record: &CapsuleRecord) -> Result<Offer, ReplError> {
        if self.down {
            return Ok(Offer::Down);
        }
        if self.held.contains(&record.record_hash) {
            return Ok(if self.mute { Offer::NoAck } else { Offer::AlreadyHeld });
        }
        let mut frame = Vec::new();
        append_frame(&mut frame, record);
        self.file.write_all(&frame)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.held.insert(record.record_hash);
        self.records.insert(record.record_hash, record.clone());
        Ok(if self.mute { Offer::NoAck } else { Offer::Stored })
    }
}

/// Receipt for one commit: who stored it and whether the quorum held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitReceipt {
    /// Replica indexes that acked.
    pub acked_by: Vec<usize>,
    /// Replica indexes that stored the record (acked or mute).
    pub stored_on: Vec<usize>,
    /// Acks reached the write quorum.
    pub durable: bool,
}

/// Group of replicas with majority-ack commits.
pub struct ReplicaGroup {
    replicas: Vec<Replica>,
    quorum: usize,
}

impl ReplicaGroup {
    /// Opens one replica log per path. The quorum is the majority of the
    /// group size.
    pub fn open(paths: &[PathBuf], fsync: bool) -> Result<ReplicaGroup, ReplError> {
        let replicas = paths
            .iter()
            .map(|p| Replica::open(p, fsync))
            .collect::<Result<Vec<_>, _>>()?;
        let quorum = write_quorum(replicas.len());
        Ok(ReplicaGroup { replicas, quorum })
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn replica(&self, i: usize) -> &Replica {
        &self.replicas[i]
    }

    /// Offers `record` to every replica and reports the ack tally. The
    /// commit is durable only if acks reach the quorum; anything less is
    /// the caller's signal to retry or fail the write upward.
    pub fn commit(&mut self, record: &CapsuleRecord) -> Result<CommitReceipt, ReplError> {
        let mut acked_by = Vec::new();
        let mut stored_on = Vec::new();
        for (i, replica) in self.replicas.iter_mut().enumerate() {
            match replica.offer(record)? {
                Offer::Stored | Offer::AlreadyHeld => {
                    acked_by.push(i);
                    stored_on.push(i);
                }
                Offer::NoAck => stored_on.push(i),
                Offer::Down => {}
            }
        }
        let durable = acked_by.len() >= self.quorum;
        Ok(CommitReceipt {
            acked_by,
            stored_on,
            durable,
        })
    }

    /// Reads `hash` from the first live replica holding it.
    pub fn get(&self, hash: &RecordHash) -> Option<&CapsuleRecord> {
        self.replicas.iter().find_map(|r| r.fetch(hash))
    }

    /// Marks replica `i` crashed: it stops storing, acking, and serving.
    pub fn kill(&mut self, i: usize) -> Result<(), ReplError> {
        self.guard(i)?;
        self.replicas[i].down = true;
        Ok(())
    }

    /// Brings replica `i` back by reopening its log from disk, exactly as
    /// a restarted process would.
    pub fn restart(&mut self, i: usize) -> Result<(), ReplError> {
        self.guard(i)?;
        let fsync = self.replicas[i].fsync;
        let path = self.replicas[i].path.clone();
        self.replicas[i] = Replica::open(path, fsync)?;
        Ok(())
    }

    /// Cuts replica `i` off on the return path: it stores but stops
    /// acking, so commits count it for nothing.
    pub fn set_mute(&mut self, i: usize, mute: bool) -> Result<(), ReplError> {
        self.guard(i)?;
        self.replicas[i].mute = mute;
        Ok(())
    }

    /// Pulls every record some live peer holds that replica `i` lacks.
    /// Returns how many records moved.
    pub fn recover(&mut self, i: usize) -> Result<usize, ReplError> {
        self.guard(i)?;
        if self.replicas[i].down {
            self.restart(i)?;
        }
        let mut want: Vec<RecordHash> = Vec::new();
        for (j, peer) in self.replicas.iter().enumerate() {
            if j == i {
                continue;
            }
            for h in peer.held_set() {
                if !self.replicas[i].held.contains(&h) {
                    want.push(h);
                }
            }
        }
        want.sort();
        want.dedup();
        let mut moved = 0;
        for h in want {
            let Some(record) = self
                .replicas
                .iter()
                .enumerate()
                .find_map(|(j, r)| if j == i { None } else { r.fetch(&h).cloned() })
            else {
                continue;
            };
            if self.replicas[i].offer(&record)? != Offer::Down {
                moved += 1;
            }
        }
        Ok(moved)
    }

    /// All live replicas hold byte-identical record sets.
    pub fn converged(&self) -> bool {
        let live: Vec<&Replica> = self.replicas.iter().filter(|r| !r.down).collect();
        let Some(first) = live.first() else {
            return true;
        };
        live.iter().all(|r| r.held == first.held)
    }

    fn guard(&self, i: usize) -> Result<(), ReplError> {
        if i >= self.replicas.len() {
            return Err(ReplError::NoSuchReplica(i));
        }
        Ok(())
    }
}
