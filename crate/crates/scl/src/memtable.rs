//! In-memory key-value state projected from decrypted record payloads.
//!
//! Each replica folds the updates it has seen into a map under a
//! last-writer-wins rule: an incoming version replaces the stored one iff
//! its `(lamport_ts, origin)` pair is lexicographically greater, so ties on
//! the timestamp are broken in favor of the higher writer id and every
//! replica picks the same winner regardless of arrival order.
//!
//! The table also carries the replica's Lamport clock (`local_sn`). The
//! clock advances on *every* applied entry — accepted or rejected — so a
//! replica that has merely observed a timestamp can never issue a smaller
//! one.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::record::{BatchLine, KvEntry, SenderId};

/// Stored version of one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Version {
    pub value: Vec<u8>,
    pub ts: u64,
    pub origin: SenderId,
}

/// Whether an applied entry won the last-writer-wins comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Stored,
    Rejected,
}

#[derive(Debug, Clone, Default)]
pub struct Memtable {
    entries: BTreeMap<Vec<u8>, Version>,
    local_sn: u64,
}

/// True iff `(ts, origin)` beats `(cur.ts, cur.origin)`.
pub fn wins(ts: u64, origin: SenderId, cur: &Version) -> bool {
    (ts, origin.0) > (cur.ts, cur.origin.0)
}

impl Memtable {
    pub fn new() -> Memtable {
        Memtable::default()
    }

    /// Current Lamport clock value.
    pub fn local_sn(&self) -> u64 {
        self.local_sn
    }

    /// Timestamp a local write issued now would carry.
    pub fn next_local_ts(&self) -> u64 {
        self.local_sn + 1
    }

    /// Applies one update attributed to `origin`. Advances the clock past
    /// the observed timestamp unconditionally, then stores the version only
    /// if it wins against the current one.
    pub fn apply(&mut self, entry: &KvEntry, origin: SenderId) -> Applied {
        self.local_sn = self.local_sn.max(entry.lamport_ts) + 1;
        match self.entries.get(&entry.key) {
            Some(cur) if !wins(entry.lamport_ts, origin, cur) => Applied::Rejected,
            _ => {
                self.entries.insert(
                    entry.key.clone(),
                    Version {
                        value: entry.value.clone(),
                        ts: entry.lamport_ts,
                        origin,
                    },
                );
                Applied::Stored
            }
        }
    }

    /// Applies a decoded batch line from a record written by `batch_sender`.
    /// A re-injected line names the original writer; everything else is
    /// attributed to the record's sender.
    pub fn apply_line(&mut self, line: &BatchLine, batch_sender: SenderId) -> Applied {
        self.apply(&line.entry, line.origin.unwrap_or(batch_sender))
    }

    pub fn lookup(&self, key: &[u8]) -> Option<&Version> {
        self.entries.get(key)
    }

    pub fn remove(&mut self, key: &[u8]) -> Option<Version> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u8>, &Version)> {
        self.entries.iter()
    }

    /// Drains all entries in key order, leaving the clock untouched.
    pub fn drain(&mut self) -> Vec<(Vec<u8>, Version)> {
        std::mem::take(&mut self.entries).into_iter().collect()
    }

    /// Digest of the visible state: keys, values, timestamps, and origins,
    /// in key order. The local clock is deliberately excluded — replicas
    /// converge on state, not on how many events each one witnessed.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (key, v) in &self.entries {
            h.update((key.len() as u64).to_be_bytes());
            h.update(key);
            h.update((v.value.len() as u64).to_be_bytes());
            h.update(&v.value);
            h.update(v.ts.to_be_bytes());
            h.update(v.origin.0.to_be_bytes());
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(key: &[u8], value: &[u8], ts: u64) -> KvEntry {
        KvEntry {
            key: key.to_vec(),
            value: value.to_vec(),
            lamport_ts: ts,
        }
    }

    #[test]
    fn clock_advances_past_observed_timestamps() {
        let mut m = Memtable::new();
        assert_eq!(m.local_sn(), 0);
        assert_eq!(m.next_local_ts(), 1);
        m.apply(&entry(b"k", b"v", 10), SenderId(1));
        assert_eq!(m.local_sn(), 11);
        m.apply(&entry(b"k", b"old", 3), SenderId(2));
        // Rejected, but the clock still moved: max(11, 3) + 1.
        assert_eq!(m.local_sn(), 12);
        assert_eq!(m.lookup(b"k").unwrap().value, b"v");
    }

    #[test]
    fn higher_timestamp_wins() {
        let mut m = Memtable::new();
        assert_eq!(m.apply(&entry(b"k", b"a", 1), SenderId(1)), Applied::Stored);
        assert_eq!(m.apply(&entry(b"k", b"b", 2), SenderId(1)), Applied::Stored);
        assert_eq!(m.apply(&entry(b"k", b"c", 1), SenderId(1)), Applied::Rejected);
        assert_eq!(m.lookup(b"k").unwrap().value, b"b");
    }

    #[test]
    fn timestamp_tie_broken_by_higher_sender() {
        let mut a = Memtable::new();
        a.apply(&entry(b"k", b"from-1", 5), SenderId(1));
        a.apply(&entry(b"k", b"from-2", 5), SenderId(2));
        assert_eq!(a.lookup(b"k").unwrap().value, b"from-2");

        // Reverse arrival order reaches the same state.
        let mut b = Memtable::new();
        b.apply(&entry(b"k", b"from-2", 5), SenderId(2));
        b.apply(&entry(b"k", b"from-1", 5), SenderId(1));
        assert_eq!(b.lookup(b"k").unwrap().value, b"from-2");
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn exact_duplicate_is_rejected_but_ticks_clock() {
        let mut m = Memtable::new();
        let e = entry(b"k", b"v", 5);
        assert_eq!(m.apply(&e, SenderId(1)), Applied::Stored);
        let sn = m.local_sn();
        assert_eq!(m.apply(&e, SenderId(1)), Applied::Rejected);
        assert_eq!(m.local_sn(), sn + 1);
        assert_eq!(m.lookup(b"k").unwrap().value, b"v");
    }

    #[test]
    fn injected_line_keeps_original_writer() {
        use crate::record::BatchLine;
        let mut m = Memtable::new();
        // A durability node (id 9) re-serves a value originally written by
        // worker 2; attribution must stay with worker 2 so a tie at ts=5
        // against worker 3 still resolves the same way everywhere.
        let line = BatchLine {
            entry: entry(b"k", b"replayed", 5),
            origin: Some(SenderId(2)),
        };
        m.apply_line(&line, SenderId(9));
        assert_eq!(m.lookup(b"k").unwrap().origin, SenderId(2));
        m.apply(&entry(b"k", b"rival", 5), SenderId(3));
        assert_eq!(m.lookup(b"k").unwrap().value, b"rival");
    }

    #[test]
    fn digest_ignores_clock() {
        let mut a = Memtable::new();
        let mut b = Memtable::new();
        a.apply(&entry(b"k", b"v", 5), SenderId(1));
        b.apply(&entry(b"k", b"v", 5), SenderId(1));
        // Push b's clock further with a rejected stale apply.
        b.apply(&entry(b"k", b"stale", 1), SenderId(1));
        assert_ne!(a.local_sn(), b.local_sn());
        assert_eq!(a.digest(), b.digest());
    }

    /// Deterministic value for (key, ts, origin) so timestamp ties always
    /// carry identical values, as they would from a non-faulty writer.
    fn val(key: u8, ts: u64, origin: u64) -> Vec<u8> {
        format!("{key}-{ts}-{origin}").into_bytes()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn shuffled_applies_converge_and_match_oracle(
            updates in proptest::collection::vec(
                (0u8..4, 1u64..8, 1u64..4), 1..40),
            seed in any::<u64>(),
        ) {
            let entries: Vec<(KvEntry, SenderId)> = updates
                .iter()
                .map(|&(k, ts, o)| (
                    KvEntry { key: vec![k], value: val(k, ts, o), lamport_ts: ts },
                    SenderId(o),
                ))
                .collect();

            // Apply in given order and in a seed-shuffled order.
            let mut forward = Memtable::new();
            for (e, o) in &entries {
                forward.apply(e, *o);
            }
            let mut shuffled = entries.clone();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
            let mut other = Memtable::new();
            for (e, o) in &shuffled {
                other.apply(e, *o);
            }
            prop_assert_eq!(forward.digest(), other.digest());

            // Brute-force oracle: per key, the max by (ts, origin).
            for key in entries.iter().map(|(e, _)| e.key.clone()) {
                let best = entries
                    .iter()
                    .filter(|(e, _)| e.key == key)
                    .max_by_key(|(e, o)| (e.lamport_ts, o.0))
                    .unwrap();
                let got = forward.lookup(&key).unwrap();
                prop_assert_eq!(&got.value, &best.0.value);
                prop_assert_eq!(got.ts, best.0.lamport_ts);
                prop_assert_eq!(got.origin, best.1);
            }
        }
    }
}
