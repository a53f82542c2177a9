//! Secure concurrency layer: a replicated, eventually-consistent key-value
//! store whose updates travel as encrypted, signed, hash-linked capsule
//! records over an untrusted, unordered, lossy multicast network.
//!
//! The crate is organized around the capsule: [`record`] defines the wire
//! format and the seal/verify/open primitives, [`chain`] keeps each replica's
//! partial DAG of records and merges it CRDT-style, [`memtable`] projects the
//! capsule into plaintext key-value state under a Lamport clock, and [`epoch`]
//! runs the coordinator-driven resynchronization protocol on top of the
//! deterministic [`simnet`] transport. [`capsuledb`] spills inactive keys into
//! an LSM layout stored as ordinary capsule records, [`replication`] provides
//! write-quorum durability, and [`pipeline`] / [`ring`] hold the throughput
//! machinery (crypto actor batching and the SPSC boundary channel).

pub mod capsuledb;
pub mod chain;
pub mod epoch;
pub mod harness;
pub mod keys;
pub mod memtable;
pub mod pipeline;
pub mod record;
pub mod replication;
pub mod ring;
pub mod simnet;

pub use record::{CapsuleRecord, KvEntry, MsgType, RecordHash, RecordHeader, SenderId};
