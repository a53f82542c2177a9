//! Capsule record format: the bit-exact canonical encoding plus the
//! seal / verify / open primitives for a single record.
//!
//! A record is the one unit everything else is built from: an encrypted
//! payload, a header that hash-links it to its predecessors, a SHA-256
//! digest over the canonical encoding, and an ECDSA P-256 signature over
//! that digest. The byte layout here is the wire and storage format and
//! is documented in `PROTOCOL.md`.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Writer identifier carried in every record header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SenderId(pub u64);

impl std::fmt::Display for SenderId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// 32-byte SHA-256 digest identifying a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordHash(pub [u8; 32]);

impl RecordHash {
    /// Sentinel parent for the first epoch: 32 zero bytes.
    pub const GENESIS: RecordHash = RecordHash([0u8; 32]);

    /// First four bytes as hex, for logs and traces.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl std::fmt::Display for RecordHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Record kinds. The discriminant is the wire byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    Data = 0,
    Rts = 1,
    Eoe = 2,
    Sync = 3,
    RecoveryReq = 4,
    RecoveryResp = 5,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<MsgType> {
        match b {
            0 => Some(MsgType::Data),
            1 => Some(MsgType::Rts),
            2 => Some(MsgType::Eoe),
            3 => Some(MsgType::Sync),
            4 => Some(MsgType::RecoveryReq),
            5 => Some(MsgType::RecoveryResp),
            _ => None,
        }
    }
}

/// Group symmetric key for payload encryption (AES-256-GCM).
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey(pub [u8; 32]);

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

const NONCE_LEN: usize = 12;

/// Plaintext metadata of a record: who wrote it, when in logical time,
/// under which sync epoch, and which records it extends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordHeader {
    pub sender: SenderId,
    pub lamport_ts: u64,
    pub epoch_seq: u64,
    pub msg_type: MsgType,
    pub prev_hashes: Vec<RecordHash>,
}

impl RecordHeader {
    /// Checks the per-type parent-count rule: DATA records carry exactly one
    /// previous hash, SYNC records at least one (one per distinct reported
    /// head), control records none.
    pub fn validate_shape(&self) -> Result<(), SealError> {
        let n = self.prev_hashes.len();
        let ok = match self.msg_type {
            MsgType::Data => n == 1,
            MsgType::Sync => n >= 1,
            MsgType::Rts | MsgType::Eoe | MsgType::RecoveryReq | MsgType::RecoveryResp => n == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(SealError::MalformedHeader {
                msg_type: self.msg_type,
                prev_hashes: n,
            })
        }
    }
}

/// One signed, encrypted, hash-linked unit of the append-only capsule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleRecord {
    pub header: RecordHeader,
    /// Nonce-prefixed AES-256-GCM ciphertext (12-byte nonce, then
    /// ciphertext with the 16-byte tag appended).
    pub ciphertext: Vec<u8>,
    /// SHA-256 over `canonical_encode(header, ciphertext)`.
    pub record_hash: RecordHash,
    /// ECDSA P-256 signature over `record_hash`, 64-byte fixed encoding.
    pub signature: Vec<u8>,
}

/// Outcome of [`verify_record`]: hash is checked before the signature,
/// and verification never touches the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    BadHash,
    BadSignature,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SealError {
    #[error("{msg_type:?} record with {prev_hashes} prev hashes violates the parent-count rule")]
    MalformedHeader { msg_type: MsgType, prev_hashes: usize },
    #[error("DATA records must carry a non-empty payload")]
    EmptyPayload,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpenError {
    #[error("authenticated decryption failed (wrong key or corrupted nonce/tag)")]
    Decrypt,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("record truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown msg_type byte {0}")]
    BadMsgType(u8),
    #[error("declared length field exceeds remaining input")]
    BadLength,
    #[error("trailing bytes after record")]
    TrailingBytes,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("batch must contain at least one entry")]
    Empty,
    #[error("entry {0} has an empty key")]
    EmptyKey(usize),
    #[error("line {0}: malformed CSV or invalid base64")]
    Parse(usize),
}

/// One key-value update destined for (or decoded from) a DATA payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub lamport_ts: u64,
}

/// A decoded batch line. `origin` is present only on re-injected entries
/// (a durability node serving a value it stored on another writer's
/// behalf) and preserves the original writer for the tie-break order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLine {
    pub entry: KvEntry,
    pub origin: Option<SenderId>,
}

/// Deterministic byte encoding of `(header, ciphertext)`: fixed-width
/// big-endian integers in field order, then the hash list, then the
/// length-prefixed ciphertext.
pub fn canonical_encode(header: &RecordHeader, ciphertext: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(33 + 32 * header.prev_hashes.len() + ciphertext.len());
    out.extend_from_slice(&header.sender.0.to_be_bytes());
    out.extend_from_slice(&header.lamport_ts.to_be_bytes());
    out.extend_from_slice(&header.epoch_seq.to_be_bytes());
    out.push(header.msg_type as u8);
    out.extend_from_slice(&(header.prev_hashes.len() as u32).to_be_bytes());
    for h in &header.prev_hashes {
        out.extend_from_slice(&h.0);
    }
    out.extend_from_slice(&(ciphertext.len() as u32).to_be_bytes());
    out.extend_from_slice(ciphertext);
    out
}

/// SHA-256 of the canonical encoding.
pub fn compute_hash(header: &RecordHeader, ciphertext: &[u8]) -> RecordHash {
    let digest = Sha256::digest(canonical_encode(header, ciphertext));
    RecordHash(digest.into())
}

/// Encrypts `plaintext` under the group key, hashes the canonical encoding,
/// and signs the hash with the writer's key. The nonce is drawn fresh from
/// `rng` per record.
pub fn seal_record<R: RngCore>(
    header: RecordHeader,
    plaintext: &[u8],
    enc_key: &SymmetricKey,
    sign_key: &SigningKey,
    rng: &mut R,
) -> Result<CapsuleRecord, SealError> {
    header.validate_shape()?;
    if header.msg_type == MsgType::Data && plaintext.is_empty() {
        return Err(SealError::EmptyPayload);
    }

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes256Gcm::new(enc_key.0.as_slice().into());
    let mut ciphertext = nonce.to_vec();
    let body = cipher
        .encrypt(&Nonce::from(nonce), Payload::from(plaintext))
        .expect("AES-GCM encryption is infallible for in-memory buffers");
    ciphertext.extend_from_slice(&body);

    let record_hash = compute_hash(&header, &ciphertext);
    let signature: Signature = sign_key.sign(&record_hash.0);
    Ok(CapsuleRecord {
        header,
        ciphertext,
        record_hash,
        signature: signature.to_bytes().to_vec(),
    })
}

/// Recomputes the record hash and checks the signature, in that order.
/// Reads no plaintext, so a third party holding only verify keys can run it.
pub fn verify_record(record: &CapsuleRecord, verify_key: &VerifyingKey) -> Verdict {
    if compute_hash(&record.header, &record.ciphertext) != record.record_hash {
        return Verdict::BadHash;
    }
    let Ok(sig) = Signature::from_slice(&record.signature) else {
        return Verdict::BadSignature;
    };
    if verify_key.verify(&record.record_hash.0, &sig).is_err() {
        return Verdict::BadSignature;
    }
    Verdict::Ok
}

/// Decrypts the payload. Callers are expected to have verified the record
/// first; any corruption or key mismatch surfaces as [`OpenError::Decrypt`].
pub fn open_record(record: &CapsuleRecord, enc_key: &SymmetricKey) -> Result<Vec<u8>, OpenError> {
    if record.ciphertext.len() < NONCE_LEN {
        return Err(OpenError::Decrypt);
    }
    let (nonce, body) = record.ciphertext.split_at(NONCE_LEN);
    let nonce: [u8; NONCE_LEN] = nonce.try_into().unwrap();
    let cipher = Aes256Gcm::new(enc_key.0.as_slice().into());
    cipher
        .decrypt(&Nonce::from(nonce), Payload::from(body))
        .map_err(|_| OpenError::Decrypt)
}

impl CapsuleRecord {
    /// Full wire encoding: canonical bytes, stored hash, then the
    /// length-prefixed signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = canonical_encode(&self.header, &self.ciphertext);
        out.extend_from_slice(&self.record_hash.0);
        out.extend_from_slice(&(self.signature.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    /// Parses one record and requires the input to be fully consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<CapsuleRecord, WireError> {
        let (record, used) = Self::parse_prefix(bytes)?;
        if used != bytes.len() {
            return Err(WireError::TrailingBytes);
        }
        Ok(record)
    }

    /// Parses one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse_prefix(bytes: &[u8]) -> Result<(CapsuleRecord, usize), WireError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], WireError> {
            if *pos + n > bytes.len() {
                return Err(WireError::Truncated(*pos));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let sender = u64::from_be_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let lamport_ts = u64::from_be_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let epoch_seq = u64::from_be_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let type_byte = take(&mut pos, 1)?[0];
        let msg_type = MsgType::from_byte(type_byte).ok_or(WireError::BadMsgType(type_byte))?;
        let prev_count = u32::from_be_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if prev_count > (bytes.len() - pos) / 32 {
            return Err(WireError::BadLength);
        }
        let mut prev_hashes = Vec::with_capacity(prev_count);
        for _ in 0..prev_count {
            prev_hashes.push(RecordHash(take(&mut pos, 32)?.try_into().unwrap()));
        }
        let ct_len = u32::from_be_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if ct_len > bytes.len() - pos {
            return Err(WireError::BadLength);
        }
        let ciphertext = take(&mut pos, ct_len)?.to_vec();
        let record_hash = RecordHash(take(&mut pos, 32)?.try_into().unwrap());
        let sig_len = u32::from_be_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if sig_len > bytes.len() - pos {
            return Err(WireError::BadLength);
        }
        let signature = take(&mut pos, sig_len)?.to_vec();

        Ok((
            CapsuleRecord {
                header: RecordHeader {
                    sender: SenderId(sender),
                    lamport_ts,
                    epoch_seq,
                    msg_type,
                    prev_hashes,
                },
                ciphertext,
                record_hash,
                signature,
            },
            pos,
        ))
    }
}

/// Appends `record` to `out` as one u32-length-prefixed frame, the layout
/// shared by every on-disk record log (storage runs, checkpoint indexes,
/// replica stores).
pub fn append_frame(out: &mut Vec<u8>, record: &CapsuleRecord) {
    let wire = record.to_bytes();
    out.extend_from_slice(&(wire.len() as u32).to_be_bytes());
    out.extend_from_slice(&wire);
}

/// Splits a byte run of length-prefixed frames back into records, stopping
/// quietly at the first torn or unparsable frame — the tail a crash leaves
/// behind is not an error, it is simply not there yet.
pub fn split_frames(bytes: &[u8]) -> Vec<CapsuleRecord> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if pos + 4 + len > bytes.len() {
            break;
        }
        match CapsuleRecord::from_bytes(&bytes[pos + 4..pos + 4 + len]) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
        pos += 4 + len;
    }
    out
}

fn encode_line(out: &mut String, entry: &KvEntry, origin: Option<SenderId>) {
    out.push_str(&B64.encode(&entry.key));
    out.push(',');
    out.push_str(&B64.encode(&entry.value));
    out.push(',');
    out.push_str(&entry.lamport_ts.to_string());
    if let Some(SenderId(o)) = origin {
        out.push(',');
        out.push_str(&o.to_string());
    }
    out.push('\n');
}

/// Serializes a batch of updates as CSV, one line per entry with the key
/// and value base64-wrapped so delimiters stay unambiguous.
pub fn encode_batch(entries: &[KvEntry]) -> Result<Vec<u8>, BatchError> {
    if entries.is_empty() {
        return Err(BatchError::Empty);
    }
    let mut out = String::new();
    for (i, e) in entries.iter().enumerate() {
        if e.key.is_empty() {
            return Err(BatchError::EmptyKey(i));
        }
        encode_line(&mut out, e, None);
    }
    Ok(out.into_bytes())
}

/// Single-entry batch carrying the original writer of the value, used when
/// a value is served back onto the multicast tree on another writer's
/// behalf.
pub fn encode_injected(entry: &KvEntry, origin: SenderId) -> Result<Vec<u8>, BatchError> {
    if entry.key.is_empty() {
        return Err(BatchError::EmptyKey(0));
    }
    let mut out = String::new();
    encode_line(&mut out, entry, Some(origin));
    Ok(out.into_bytes())
}

/// Parses a CSV batch back into entries. Inverse of [`encode_batch`]:
/// `decode_batch(encode_batch(x))` yields `x` with no origins set.
pub fn decode_batch(bytes: &[u8]) -> Result<Vec<BatchLine>, BatchError> {
    let text = std::str::from_utf8(bytes).map_err(|_| BatchError::Parse(0))?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split(',');
        let key = fields
            .next()
            .and_then(|f| B64.decode(f).ok())
            .ok_or(BatchError::Parse(i))?;
        let value = fields
            .next()
            .and_then(|f| B64.decode(f).ok())
            .ok_or(BatchError::Parse(i))?;
        let lamport_ts = fields
            .next()
            .and_then(|f| f.parse::<u64>().ok())
            .ok_or(BatchError::Parse(i))?;
        let origin = match fields.next() {
            None => None,
            Some(f) => Some(SenderId(f.parse::<u64>().map_err(|_| BatchError::Parse(i))?)),
        };
        if fields.next().is_some() || key.is_empty() {
            return Err(BatchError::Parse(i));
        }
        lines.push(BatchLine {
            entry: KvEntry {
                key,
                value,
                lamport_ts,
            },
            origin,
        });
    }
    if lines.is_empty() {
        return Err(BatchError::Empty);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{RngCore, SeedableRng};

    fn test_keys(seed: u8) -> (SymmetricKey, SigningKey) {
        let enc = SymmetricKey([seed; 32]);
        let sign = SigningKey::from_slice(&[seed.wrapping_add(1); 32]).unwrap();
        (enc, sign)
    }

    fn data_header(sender: u64, ts: u64) -> RecordHeader {
        RecordHeader {
            sender: SenderId(sender),
            lamport_ts: ts,
            epoch_seq: 0,
            msg_type: MsgType::Data,
            prev_hashes: vec![RecordHash::GENESIS],
        }
    }

    #[test]
    fn canonical_encode_is_deterministic() {
        let h = data_header(3, 17);
        let ct = b"opaque bytes".to_vec();
        assert_eq!(canonical_encode(&h, &ct), canonical_encode(&h, &ct));
    }

    #[test]
    fn canonical_encode_differs_on_lamport_ts() {
        let a = data_header(3, 17);
        let b = data_header(3, 18);
        assert_ne!(canonical_encode(&a, b"x"), canonical_encode(&b, b"x"));
    }

    #[test]
    fn canonical_encode_length_formula() {
        // 8+8+8+1+4 + 32*prevs + 4 + |ct|, checked over random shapes.
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let prevs = (rng.next_u32() % 5) as usize;
            let ct_len = (rng.next_u32() % 300) as usize;
            let header = RecordHeader {
                sender: SenderId(rng.next_u64()),
                lamport_ts: rng.next_u64(),
                epoch_seq: rng.next_u64(),
                msg_type: MsgType::Sync,
                prev_hashes: (0..prevs)
                    .map(|_| {
                        let mut h = [0u8; 32];
                        rng.fill_bytes(&mut h);
                        RecordHash(h)
                    })
                    .collect(),
            };
            let mut ct = vec![0u8; ct_len];
            rng.fill_bytes(&mut ct);
            let expected = 8 + 8 + 8 + 1 + 4 + 32 * prevs + 4 + ct_len;
            assert_eq!(canonical_encode(&header, &ct).len(), expected);
        }
    }

    #[test]
    fn seal_open_round_trip() {
        let (enc, sign) = test_keys(9);
        let mut rng = StdRng::seed_from_u64(1);
        let record = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        assert_eq!(verify_record(&record, sign.verifying_key()), Verdict::Ok);
        assert_eq!(open_record(&record, &enc).unwrap(), b"payload");
    }

    #[test]
    fn fresh_nonces_give_distinct_ciphertexts() {
        let (enc, sign) = test_keys(9);
        let mut rng = StdRng::seed_from_u64(2);
        let a = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        let b = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_eq!(verify_record(&a, sign.verifying_key()), Verdict::Ok);
        assert_eq!(verify_record(&b, sign.verifying_key()), Verdict::Ok);
    }

    #[test]
    fn cross_writer_verification_fails() {
        let (enc, sign_a) = test_keys(10);
        let (_, sign_b) = test_keys(20);
        let mut rng = StdRng::seed_from_u64(3);
        let record = seal_record(data_header(1, 5), b"payload", &enc, &sign_a, &mut rng).unwrap();
        assert_eq!(verify_record(&record, sign_a.verifying_key()), Verdict::Ok);
        assert_eq!(
            verify_record(&record, sign_b.verifying_key()),
            Verdict::BadSignature
        );
    }

    #[test]
    fn flipped_ciphertext_bit_is_bad_hash() {
        let (enc, sign) = test_keys(11);
        let mut rng = StdRng::seed_from_u64(4);
        let mut record = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        record.ciphertext[3] ^= 0x01;
        assert_eq!(verify_record(&record, sign.verifying_key()), Verdict::BadHash);
    }

    #[test]
    fn rehashed_tamper_is_bad_signature() {
        // Forge: tamper the ciphertext, recompute the hash so the hash check
        // passes, but keep the old signature.
        let (enc, sign) = test_keys(12);
        let mut rng = StdRng::seed_from_u64(5);
        let mut record = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        record.ciphertext[3] ^= 0x01;
        record.record_hash = compute_hash(&record.header, &record.ciphertext);
        assert_eq!(
            verify_record(&record, sign.verifying_key()),
            Verdict::BadSignature
        );
    }

    #[test]
    fn wrong_symmetric_key_fails_decrypt() {
        let (enc, sign) = test_keys(13);
        let mut rng = StdRng::seed_from_u64(6);
        let record = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        let wrong = SymmetricKey([0xaa; 32]);
        assert_eq!(open_record(&record, &wrong), Err(OpenError::Decrypt));
    }

    #[test]
    fn truncated_ciphertext_fails_decrypt_without_panic() {
        let (enc, sign) = test_keys(14);
        let mut rng = StdRng::seed_from_u64(7);
        let record = seal_record(data_header(1, 5), b"payload", &enc, &sign, &mut rng).unwrap();
        for cut in 0..record.ciphertext.len() {
            let mut truncated = record.clone();
            truncated.ciphertext.truncate(cut);
            assert_eq!(open_record(&truncated, &enc), Err(OpenError::Decrypt));
        }
    }

    #[test]
    fn empty_data_payload_rejected() {
        let (enc, sign) = test_keys(15);
        let mut rng = StdRng::seed_from_u64(8);
        assert_eq!(
            seal_record(data_header(1, 5), b"", &enc, &sign, &mut rng),
            Err(SealError::EmptyPayload)
        );
    }

    #[test]
    fn header_shape_rule_enforced() {
        let (enc, sign) = test_keys(16);
        let mut rng = StdRng::seed_from_u64(9);
        let bad = RecordHeader {
            msg_type: MsgType::Rts,
            ..data_header(1, 5)
        };
        assert!(matches!(
            seal_record(bad, b"x", &enc, &sign, &mut rng),
            Err(SealError::MalformedHeader { .. })
        ));
    }

    #[test]
    fn wire_round_trip() {
        let (enc, sign) = test_keys(17);
        let mut rng = StdRng::seed_from_u64(10);
        let record = seal_record(data_header(4, 9), b"payload", &enc, &sign, &mut rng).unwrap();
        let bytes = record.to_bytes();
        assert_eq!(CapsuleRecord::from_bytes(&bytes).unwrap(), record);
        // Every strict prefix must fail cleanly.
        for cut in 0..bytes.len() {
            assert!(CapsuleRecord::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn batch_single_entry_round_trips() {
        let entries = vec![KvEntry {
            key: b"a".to_vec(),
            value: b"b".to_vec(),
            lamport_ts: 1,
        }];
        let bytes = encode_batch(&entries).unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        let lines = decode_batch(&bytes).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].entry, entries[0]);
        assert_eq!(lines[0].origin, None);
    }

    #[test]
    fn batch_survives_delimiter_bytes() {
        let entries = vec![KvEntry {
            key: b"k,ey\n".to_vec(),
            value: b",\n,\r\n\0".to_vec(),
            lamport_ts: 42,
        }];
        let decoded = decode_batch(&encode_batch(&entries).unwrap()).unwrap();
        assert_eq!(decoded[0].entry, entries[0]);
    }

    #[test]
    fn batch_thousand_random_entries() {
        let mut rng = StdRng::seed_from_u64(11);
        let entries: Vec<KvEntry> = (0..1000)
            .map(|_| {
                let mut key = vec![0u8; 1 + (rng.next_u32() % 16) as usize];
                let mut value = vec![0u8; (rng.next_u32() % 64) as usize];
                rng.fill_bytes(&mut key);
                rng.fill_bytes(&mut value);
                KvEntry {
                    key,
                    value,
                    lamport_ts: rng.next_u64(),
                }
            })
            .collect();
        let decoded = decode_batch(&encode_batch(&entries).unwrap()).unwrap();
        assert_eq!(decoded.len(), entries.len());
        for (line, entry) in decoded.iter().zip(&entries) {
            assert_eq!(&line.entry, entry);
        }
    }

    #[test]
    fn injected_line_preserves_origin() {
        let entry = KvEntry {
            key: b"k".to_vec(),
            value: b"v".to_vec(),
            lamport_ts: 7,
        };
        let bytes = encode_injected(&entry, SenderId(3)).unwrap();
        let lines = decode_batch(&bytes).unwrap();
        assert_eq!(lines[0].origin, Some(SenderId(3)));
        assert_eq!(lines[0].entry, entry);
    }

    #[test]
    fn malformed_batch_is_parse_error() {
        assert!(matches!(
            decode_batch(b"not-base64!,bm8=,1\n"),
            Err(BatchError::Parse(0))
        ));
        assert!(matches!(
            decode_batch(b"YQ==,Yg==,notanumber\n"),
            Err(BatchError::Parse(0))
        ));
        assert!(matches!(decode_batch(b""), Err(BatchError::Empty)));
    }

    proptest! {
        #[test]
        fn batch_round_trip_identity(
            raw in proptest::collection::vec(
                (proptest::collection::vec(any::<u8>(), 1..20),
                 proptest::collection::vec(any::<u8>(), 0..40),
                 any::<u64>()),
                1..20,
            )
        ) {
            let entries: Vec<KvEntry> = raw
                .into_iter()
                .map(|(key, value, lamport_ts)| KvEntry { key, value, lamport_ts })
                .collect();
            let decoded = decode_batch(&encode_batch(&entries).unwrap()).unwrap();
            prop_assert_eq!(
                decoded.iter().map(|l| l.entry.clone()).collect::<Vec<_>>(),
                entries
            );
        }

        #[test]
        fn canonical_encode_injective_on_corpus(
            s1 in 0u64..50, t1 in 0u64..50, e1 in 0u64..5,
            s2 in 0u64..50, t2 in 0u64..50, e2 in 0u64..5,
            ct1 in proptest::collection::vec(any::<u8>(), 0..30),
            ct2 in proptest::collection::vec(any::<u8>(), 0..30),
        ) {
            let h1 = RecordHeader {
                sender: SenderId(s1), lamport_ts: t1, epoch_seq: e1,
                msg_type: MsgType::Data, prev_hashes: vec![RecordHash::GENESIS],
            };
            let h2 = RecordHeader {
                sender: SenderId(s2), lamport_ts: t2, epoch_seq: e2,
                msg_type: MsgType::Data, prev_hashes: vec![RecordHash::GENESIS],
            };
            let same_input = h1 == h2 && ct1 == ct2;
            let same_encoding = canonical_encode(&h1, &ct1) == canonical_encode(&h2, &ct2);
            prop_assert_eq!(same_input, same_encoding);
        }
    }
}
