//! Replica-local store of capsule records: a partial, hash-linked DAG.
//!
//! Every replica holds some subset of all records ever sealed, keyed by
//! record hash. Because records are immutable and identified by content,
//! the whole structure is a grow-only set: [`Chain::merge`] is plain set
//! union, which makes replica state a CRDT — merging in any order, any
//! grouping, any number of times yields the same set.
//!
//! [`Chain::backtrack`] is the integrity walk used at epoch validation:
//! starting from a set of claimed heads it follows `prev_hashes` links
//! until it reaches a known boundary, reporting every referenced hash it
//! does not hold. Those are exactly the records to recover.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use sha2::{Digest, Sha256};

use crate::record::{CapsuleRecord, RecordHash, Verdict, WireError};

/// Result of an insert: either the record was new or we already held it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Duplicate,
}

/// Outcome of [`Chain::backtrack`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backtrack {
    /// Hashes of records we hold that are reachable from the given heads,
    /// boundary excluded.
    pub reachable: Vec<RecordHash>,
    /// Hashes referenced on some path from the heads that we do not hold.
    /// Sorted, so recovery requests are deterministic.
    pub missing: BTreeSet<RecordHash>,
}

#[derive(Debug, Clone, Default)]
pub struct Chain {
    records: HashMap<RecordHash, CapsuleRecord>,
    /// Hashes referenced as a parent by at least one held record.
    referenced: HashSet<RecordHash>,
}

impl Chain {
    pub fn new() -> Chain {
        Chain::default()
    }

    /// Inserts by content hash; re-inserting the same record is a no-op.
    pub fn insert(&mut self, record: CapsuleRecord) -> InsertOutcome {
        let hash = record.record_hash;
        if self.records.contains_key(&hash) {
            return InsertOutcome::Duplicate;
        }
        for p in &record.header.prev_hashes {
            self.referenced.insert(*p);
        }
        self.records.insert(hash, record);
        InsertOutcome::Inserted
    }

    pub fn contains(&self, hash: &RecordHash) -> bool {
        self.records.contains_key(hash)
    }

    pub fn get(&self, hash: &RecordHash) -> Option<&CapsuleRecord> {
        self.records.get(hash)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CapsuleRecord> {
        self.records.values()
    }

    /// Set union with another replica's records.
    pub fn merge(&mut self, other: &Chain) {
        for record in other.records.values() {
            self.insert(record.clone());
        }
    }

    /// Records not referenced as a parent by anything we hold: the current
    /// frontier of the DAG as this replica sees it.
    pub fn heads(&self) -> Vec<RecordHash> {
        let mut out: Vec<RecordHash> = self
            .records
            .keys()
            .filter(|h| !self.referenced.contains(h))
            .copied()
            .collect();
        out.sort();
        out
    }

    /// Walks parent links from `heads` until hitting `stop` hashes or the
    /// genesis sentinel. Heads or parents we do not hold are reported as
    /// missing rather than expanded.
    ///
    /// A stop hash prunes the walk only when we actually hold it: the stop
    /// set marks history assumed verified by an earlier walk, and that
    /// assumption is only safe for records we have. An unheld stop hash is
    /// still a hole and is reported, or it could fall out of every future
    /// frontier unnoticed.
    pub fn backtrack(&self, heads: &[RecordHash], stop: &HashSet<RecordHash>) -> Backtrack {
        let mut visited: HashSet<RecordHash> = HashSet::new();
        let mut reachable = Vec::new();
        let mut missing = BTreeSet::new();
        let mut work: Vec<RecordHash> = heads.to_vec();
        while let Some(hash) = work.pop() {
            if hash == RecordHash::GENESIS || !visited.insert(hash) {
                continue;
            }
            match self.records.get(&hash) {
                Some(record) => {
                    if stop.contains(&hash) {
                        continue;
                    }
                    reachable.push(hash);
                    work.extend(record.header.prev_hashes.iter().copied());
                }
                None => {
                    missing.insert(hash);
                }
            }
        }
        reachable.sort();
        Backtrack { reachable, missing }
    }

    /// Collects the `roots` we hold plus their held ancestry, breadth
    /// first, up to `budget` records: the repair payload for a peer that
    /// flagged the roots as missing. The peer cannot see past a hole (it
    /// lacks the parent list), so shipping the lineage below each root in
    /// one response spares a round trip per missing link.
    pub fn ancestry(&self, roots: &[RecordHash], budget: usize) -> Chain {
        let mut out = Chain::new();
        let mut seen: HashSet<RecordHash> = HashSet::new();
        let mut queue: VecDeque<RecordHash> = roots.iter().copied().collect();
        while let Some(hash) = queue.pop_front() {
            if out.len() >= budget {
                break;
            }
            if hash == RecordHash::GENESIS || !seen.insert(hash) {
                continue;
            }
            if let Some(record) = self.records.get(&hash) {
                out.insert(record.clone());
                queue.extend(record.header.prev_hashes.iter().copied());
            }
        }
        out
    }

    /// Order-independent digest of the record set, for convergence audits:
    /// two replicas hold the same records iff their digests match.
    pub fn digest(&self) -> [u8; 32] {
        let mut hashes: Vec<&RecordHash> = self.records.keys().collect();
        hashes.sort();
        let mut h = Sha256::new();
        for rh in hashes {
            h.update(rh.0);
        }
        h.finalize().into()
    }

    /// Verifies every held record with the key chosen by `key_check`, which
    /// returns the verdict for one record (callers bring their own per-era
    /// key lookup). Returns the first failure.
    pub fn authenticate<F>(&self, mut key_check: F) -> Result<usize, (RecordHash, Verdict)>
    where
        F: FnMut(&CapsuleRecord) -> Verdict,
    {
        let mut checked = 0;
        for record in self.records.values() {
            match key_check(record) {
                Verdict::Ok => checked += 1,
                v => return Err((record.record_hash, v)),
            }
        }
        Ok(checked)
    }

    /// Serializes the full record set: a count, then each record as a
    /// length-prefixed wire encoding. Iteration order is by hash so the
    /// bytes are deterministic for a given set.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut hashes: Vec<&RecordHash> = self.records.keys().collect();
        hashes.sort();
        let mut out = Vec::new();
        out.extend_from_slice(&(hashes.len() as u32).to_be_bytes());
        for h in hashes {
            let bytes = self.records[h].to_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Chain, WireError> {
        if bytes.len() < 4 {
            return Err(WireError::Truncated(bytes.len()));
        }
        let count = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let mut pos = 4usize;
        let mut chain = Chain::new();
        for _ in 0..count {
            if pos + 4 > bytes.len() {
                return Err(WireError::Truncated(pos));
            }
            let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + len > bytes.len() {
                return Err(WireError::BadLength);
            }
            let record = CapsuleRecord::from_bytes(&bytes[pos..pos + len])?;
            pos += len;
            chain.insert(record);
        }
        if pos != bytes.len() {
            return Err(WireError::TrailingBytes);
        }
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{compute_hash, MsgType, RecordHeader, SenderId};
    use proptest::prelude::*;

    /// Builds an unsigned record (hash valid, signature empty). Merge and
    /// backtrack semantics only depend on hashes and links.
    fn raw_record(sender: u64, ts: u64, prevs: Vec<RecordHash>, payload: &[u8]) -> CapsuleRecord {
        let header = RecordHeader {
            sender: SenderId(sender),
            lamport_ts: ts,
            epoch_seq: 0,
            msg_type: if prevs.len() == 1 { MsgType::Data } else { MsgType::Sync },
            prev_hashes: prevs,
        };
        let record_hash = compute_hash(&header, payload);
        CapsuleRecord {
            header,
            ciphertext: payload.to_vec(),
            record_hash,
            signature: Vec::new(),
        }
    }

    fn chain_of(records: &[CapsuleRecord]) -> Chain {
        let mut c = Chain::new();
        for r in records {
            c.insert(r.clone());
        }
        c
    }

    #[test]
    fn insert_is_idempotent() {
        let r = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let mut c = Chain::new();
        assert_eq!(c.insert(r.clone()), InsertOutcome::Inserted);
        assert_eq!(c.insert(r), InsertOutcome::Duplicate);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn heads_track_frontier() {
        let a = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let b = raw_record(1, 2, vec![a.record_hash], b"b");
        let c = raw_record(2, 1, vec![RecordHash::GENESIS], b"c");
        let chain = chain_of(&[a, b.clone(), c.clone()]);
        let mut expected = vec![b.record_hash, c.record_hash];
        expected.sort();
        assert_eq!(chain.heads(), expected);
    }

    #[test]
    fn backtrack_reports_missing_parent() {
        let a = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let b = raw_record(1, 2, vec![a.record_hash], b"b");
        let c = raw_record(1, 3, vec![b.record_hash], b"c");
        // Hold a and c but not b: the walk from c must flag b as missing
        // and must not reach a (its link is behind the hole).
        let chain = chain_of(&[a.clone(), c.clone()]);
        let result = chain.backtrack(&[c.record_hash], &HashSet::new());
        assert_eq!(result.reachable, vec![c.record_hash]);
        assert_eq!(result.missing.iter().copied().collect::<Vec<_>>(), vec![b.record_hash]);
    }

    #[test]
    fn backtrack_stops_at_boundary() {
        let a = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let b = raw_record(1, 2, vec![a.record_hash], b"b");
        let c = raw_record(1, 3, vec![b.record_hash], b"c");
        let chain = chain_of(&[a.clone(), b.clone(), c.clone()]);
        let stop: HashSet<RecordHash> = [a.record_hash].into_iter().collect();
        let result = chain.backtrack(&[c.record_hash], &stop);
        let mut expected = vec![b.record_hash, c.record_hash];
        expected.sort();
        assert_eq!(result.reachable, expected);
        assert!(result.missing.is_empty());
    }

    #[test]
    fn backtrack_missing_head() {
        let chain = Chain::new();
        let ghost = raw_record(1, 1, vec![RecordHash::GENESIS], b"ghost");
        let result = chain.backtrack(&[ghost.record_hash], &HashSet::new());
        assert!(result.reachable.is_empty());
        assert_eq!(result.missing.len(), 1);
    }

    #[test]
    fn merge_unions_records() {
        let a = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let b = raw_record(2, 1, vec![RecordHash::GENESIS], b"b");
        let mut left = chain_of(&[a.clone()]);
        let right = chain_of(&[a, b]);
        left.merge(&right);
        assert_eq!(left.len(), 2);
        assert_eq!(left.digest(), right.digest());
    }

    #[test]
    fn serialization_round_trip() {
        let a = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let b = raw_record(1, 2, vec![a.record_hash], b"b");
        let chain = chain_of(&[a, b]);
        let restored = Chain::from_bytes(&chain.to_bytes()).unwrap();
        assert_eq!(restored.digest(), chain.digest());
        assert_eq!(restored.len(), 2);
        // Truncations fail cleanly.
        let bytes = chain.to_bytes();
        for cut in 0..bytes.len() {
            assert!(Chain::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn authenticate_reports_first_bad_record() {
        let good = raw_record(1, 1, vec![RecordHash::GENESIS], b"a");
        let chain = chain_of(&[good]);
        assert_eq!(chain.authenticate(|_| Verdict::Ok), Ok(1));
        assert!(matches!(
            chain.authenticate(|_| Verdict::BadHash),
            Err((_, Verdict::BadHash))
        ));
    }

    /// Strategy: a pool of distinct records, then arbitrary subsets.
    fn record_pool() -> Vec<CapsuleRecord> {
        let mut pool = Vec::new();
        for sender in 1u64..=3 {
            let mut prev = RecordHash::GENESIS;
            for ts in 1u64..=5 {
                let r = raw_record(sender, ts, vec![prev], format!("{sender}/{ts}").as_bytes());
                prev = r.record_hash;
                pool.push(r);
            }
        }
        pool
    }

    fn subset(pool: &[CapsuleRecord], mask: u16) -> Chain {
        let mut c = Chain::new();
        for (i, r) in pool.iter().enumerate() {
            if mask & (1 << i) != 0 {
                c.insert(r.clone());
            }
        }
        c
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn merge_is_commutative(a_mask in any::<u16>(), b_mask in any::<u16>()) {
            let pool = record_pool();
            let (a, b) = (subset(&pool, a_mask), subset(&pool, b_mask));
            let mut ab = a.clone();
            ab.merge(&b);
            let mut ba = b.clone();
            ba.merge(&a);
            prop_assert_eq!(ab.digest(), ba.digest());
        }

        #[test]
        fn merge_is_associative(
            a_mask in any::<u16>(),
            b_mask in any::<u16>(),
            c_mask in any::<u16>(),
        ) {
            let pool = record_pool();
            let (a, b, c) = (subset(&pool, a_mask), subset(&pool, b_mask), subset(&pool, c_mask));
            let mut left = a.clone();
            {
                let mut bc = b.clone();
                bc.merge(&c);
                left.merge(&bc);
            }
            let mut right = a.clone();
            right.merge(&b);
            right.merge(&c);
            prop_assert_eq!(left.digest(), right.digest());
        }

        #[test]
        fn merge_is_idempotent(a_mask in any::<u16>(), b_mask in any::<u16>()) {
            let pool = record_pool();
            let (a, b) = (subset(&pool, a_mask), subset(&pool, b_mask));
            let mut once = a.clone();
            once.merge(&b);
            let mut twice = a.clone();
            twice.merge(&b);
            twice.merge(&b);
            prop_assert_eq!(once.digest(), twice.digest());
            let mut self_merge = a.clone();
            self_merge.merge(&a);
            prop_assert_eq!(self_merge.digest(), a.digest());
        }

        #[test]
        fn backtrack_matches_reachability_oracle(mask in any::<u16>(), head_pick in any::<u8>()) {
            let pool = record_pool();
            let chain = subset(&pool, mask);
            let head = pool[(head_pick as usize) % pool.len()].record_hash;
            let result = chain.backtrack(&[head], &HashSet::new());

            // Oracle: breadth-first reachability computed independently over
            // the full pool's link table.
            let by_hash: std::collections::HashMap<RecordHash, &CapsuleRecord> =
                pool.iter().map(|r| (r.record_hash, r)).collect();
            let mut oracle_reach = std::collections::BTreeSet::new();
            let mut oracle_missing = std::collections::BTreeSet::new();
            let mut queue = vec![head];
            let mut seen = HashSet::new();
            while let Some(h) = queue.pop() {
                if h == RecordHash::GENESIS || !seen.insert(h) {
                    continue;
                }
                if chain.contains(&h) {
                    oracle_reach.insert(h);
                    queue.extend(by_hash[&h].header.prev_hashes.iter().copied());
                } else {
                    oracle_missing.insert(h);
                }
            }
            prop_assert_eq!(
                result.reachable.into_iter().collect::<std::collections::BTreeSet<_>>(),
                oracle_reach
            );
            prop_assert_eq!(result.missing, oracle_missing);
        }
    }
}
