//! Single-producer single-consumer ring buffer: the channel that carries
//! sealed records across the trust boundary between the crypto stage and
//! the network-facing side.
//!
//! Each slot carries a sequence stamp that encodes whose turn it is: slot
//! `i` starts stamped `i`; the producer claims position `pos` only when the
//! stamp equals `pos`, fills the slot, and publishes by storing `pos + 1`;
//! the consumer waits for `pos + 1` and releases with `pos + capacity`, at
//! which point the slot is ready for the producer's next lap. The stamp is
//! the only shared word, written with release stores and read with acquire
//! loads, so payload bytes written before publish are visible after claim
//! on the other side.
//!
//! Payloads live in one pre-allocated arena, one fixed-size chunk per slot,
//! so steady-state transfer allocates nothing; a payload larger than its
//! chunk falls back to a boxed spill buffer. The consumer reads payloads in
//! place through a guard and, when `poison_on_free` is set, the chunk is
//! scribbled with `0xDE` as the guard drops — a stale pointer into the
//! arena then reads poison instead of silently reading the next message.
//!
//! The producer and consumer endpoints are move-only values whose methods
//! take `&mut self`, so exactly one thread can drive each side; the types
//! are deliberately `!Sync`.

use std::cell::UnsafeCell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Byte written over a released chunk when poisoning is enabled.
pub const POISON_BYTE: u8 = 0xDE;

/// Ring geometry. Defaults give a 16 MiB arena: 1024 slots of 16 KiB.
#[derive(Debug, Clone)]
pub struct RingConfig {
    /// Number of slots; must be a power of two.
    pub capacity: usize,
    /// Bytes of arena backing each slot.
    pub chunk_size: usize,
    /// Scribble released chunks to surface use-after-release bugs.
    pub poison_on_free: bool,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            capacity: 1024,
            chunk_size: 16 * 1024,
            poison_on_free: false,
        }
    }
}

impl RingConfig {
    pub fn arena_bytes(&self) -> usize {
        self.capacity * self.chunk_size
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PushError {
    #[error("ring is full")]
    Full,
    #[error("consumer endpoint was dropped")]
    Disconnected,
}

struct Slot {
    seq: AtomicU64,
    len: UnsafeCell<usize>,
    /// Oversize fallback; `Some` means the payload lives here, not in the
    /// arena chunk.
    spill: UnsafeCell<Option<Box<[u8]>>>,
}

struct Ring {
    slots: Box<[Slot]>,
    arena: Box<[UnsafeCell<u8>]>,
    chunk_size: usize,
    mask: u64,
    poison: bool,
    producer_alive: AtomicBool,
    consumer_alive: AtomicBool,
    spill_count: AtomicU64,
}

// Slots hand exclusive access back and forth via the seq stamp protocol;
// the arena is only touched by whichever side currently owns the slot.
unsafe impl Send for Ring {}
unsafe impl Sync for Ring {}

impl Ring {
    /// Arena chunk backing slot `idx`. Caller must own the slot per the
    /// stamp protocol.
    #[allow(clippy::mut_from_ref)]
    unsafe fn chunk(&self, idx: usize) -> &mut [u8] {
        let start = idx * self.chunk_size;
        std::slice::from_raw_parts_mut(self.arena[start].get(), self.chunk_size)
    }
}

/// Sending endpoint. Move it to the producing thread; it cannot be shared.
pub struct RingProducer {
    ring: Arc<Ring>,
    head: u64,
    _not_sync: PhantomData<*mut ()>,
}

/// Receiving endpoint. Move it to the consuming thread; it cannot be shared.
pub struct RingConsumer {
    ring: Arc<Ring>,
    tail: u64,
    _not_sync: PhantomData<*mut ()>,
}

// The phantom raw pointer removes Send and Sync; Send is safe to restore
// because all state behind the Arc is synchronized by the slot stamps.
unsafe impl Send for RingProducer {}
unsafe impl Send for RingConsumer {}

/// Creates a connected producer/consumer pair over a fresh arena.
///
/// Panics if `capacity` is not a power of two or `chunk_size` is zero —
/// both are construction-time programming errors, not runtime conditions.
pub fn ring(config: RingConfig) -> (RingProducer, RingConsumer) {
    assert!(
        config.capacity.is_power_of_two() && config.capacity > 0,
        "ring capacity must be a power of two, got {}",
        config.capacity
    );
    assert!(config.chunk_size > 0, "chunk size must be non-zero");
    let slots: Box<[Slot]> = (0..config.capacity)
        .map(|i| Slot {
            seq: AtomicU64::new(i as u64),
            len: UnsafeCell::new(0),
            spill: UnsafeCell::new(None),
        })
        .collect();
    let arena: Box<[UnsafeCell<u8>]> = (0..config.arena_bytes())
        .map(|_| UnsafeCell::new(0))
        .collect();
    let ring = Arc::new(Ring {
        slots,
        arena,
        chunk_size: config.chunk_size,
        mask: (config.capacity - 1) as u64,
        poison: config.poison_on_free,
        producer_alive: AtomicBool::new(true),
        consumer_alive: AtomicBool::new(true),
        spill_count: AtomicU64::new(0),
    });
    (
        RingProducer {
            ring: Arc::clone(&ring),
            head: 0,
            _not_sync: PhantomData,
        },
        RingConsumer {
            ring,
            tail: 0,
            _not_sync: PhantomData,
        },
    )
}

const SPIN_LIMIT: u32 = 64;

impl RingProducer {
    /// Copies `payload` into the next slot if one is free.
    pub fn try_push(&mut self, payload: &[u8]) -> Result<(), PushError> {
        let ring = &*self.ring;
        if !ring.consumer_alive.load(Ordering::Acquire) {
            return Err(PushError::Disconnected);
        }
        let pos = self.head;
        let slot = &ring.slots[(pos & ring.mask) as usize];
        if slot.seq.load(Ordering::Acquire) != pos {
            return Err(PushError::Full);
        }
        unsafe {
            *slot.len.get() = payload.len();
            if payload.len() <= ring.chunk_size {
                ring.chunk((pos & ring.mask) as usize)[..payload.len()].copy_from_slice(payload);
                *slot.spill.get() = None;
            } else {
                *slot.spill.get() = Some(payload.to_vec().into_boxed_slice());
                ring.spill_count.fetch_add(1, Ordering::Relaxed);
            }
        }
        slot.seq.store(pos + 1, Ordering::Release);
        self.head = pos + 1;
        Ok(())
    }

    /// Blocking push: spins briefly, then yields until a slot frees up.
    pub fn push(&mut self, payload: &[u8]) -> Result<(), PushError> {
        let mut spins = 0u32;
        loop {
            match self.try_push(payload) {
                Err(PushError::Full) => {
                    if spins < SPIN_LIMIT {
                        spins += 1;
                        std::hint::spin_loop();
                    } else {
                        std::thread::yield_now();
                    }
                }
                other => return other,
            }
        }
    }

    /// Messages that exceeded the chunk size and took the allocation path.
    pub fn spill_count(&self) -> u64 {
        self.ring.spill_count.load(Ordering::Relaxed)
    }
}

impl Drop for RingProducer {
    fn drop(&mut self) {
        self.ring.producer_alive.store(false, Ordering::Release);
    }
}

/// Borrowed view of one received payload. The slot is handed back to the
/// producer when this drops; until then the consumer cannot advance, which
/// is what makes the in-place read safe.
pub struct RingMsg<'a> {
    consumer: &'a mut RingConsumer,
    pos: u64,
}

impl RingMsg<'_> {
    pub fn payload(&self) -> &[u8] {
        let ring = &*self.consumer.ring;
        let idx = (self.pos & ring.mask) as usize;
        let slot = &ring.slots[idx];
        unsafe {
            let len = *slot.len.get();
            match &*slot.spill.get() {
                Some(boxed) => &boxed[..len],
                None => &ring.chunk(idx)[..len],
            }
        }
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.payload().to_vec()
    }
}

impl std::ops::Deref for RingMsg<'_> {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        self.payload()
    }
}

impl Drop for RingMsg<'_> {
    fn drop(&mut self) {
        let ring = &*self.consumer.ring;
        let idx = (self.pos & ring.mask) as usize;
        let slot = &ring.slots[idx];
        unsafe {
            *slot.spill.get() = None;
            if ring.poison {
                ring.chunk(idx).fill(POISON_BYTE);
            }
        }
        slot.seq
            .store(self.pos + ring.mask + 1, Ordering::Release);
        self.consumer.tail = self.pos + 1;
    }
}

impl RingConsumer {
    /// Takes the next message if one is ready. The returned guard borrows
    /// the consumer; drop it to release the slot.
    pub fn try_pop(&mut self) -> Option<RingMsg<'_>> {
        let pos = self.tail;
        let slot = &self.ring.slots[(pos & self.ring.mask) as usize];
        if slot.seq.load(Ordering::Acquire) != pos + 1 {
            return None;
        }
        Some(RingMsg { consumer: self, pos })
    }

    /// Blocking pop. Returns `None` once the producer is gone and the ring
    /// is drained.
    pub fn pop(&mut self) -> Option<RingMsg<'_>> {
        let mut spins = 0u32;
        loop {
            // Borrow-checker friendly readiness probe; the guard itself is
            // created only after we know the slot is ready.
            let pos = self.tail;
            let ready = {
                let slot = &self.ring.slots[(pos & self.ring.mask) as usize];
                slot.seq.load(Ordering::Acquire) == pos + 1
            };
            if ready {
                return Some(RingMsg { consumer: self, pos });
            }
            if !self.ring.producer_alive.load(Ordering::Acquire) {
                // Re-check: the producer may have published between our
                // probe and its death.
                let slot = &self.ring.slots[(pos & self.ring.mask) as usize];
                if slot.seq.load(Ordering::Acquire) == pos + 1 {
                    return Some(RingMsg { consumer: self, pos });
                }
                return None;
            }
            if spins < SPIN_LIMIT {
                spins += 1;
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
        }
    }

    /// Convenience: blocking pop straight into an owned buffer.
    pub fn pop_vec(&mut self) -> Option<Vec<u8>> {
        self.pop().map(|m| m.to_vec())
    }

    #[cfg(test)]
    fn chunk_snapshot(&self, idx: usize) -> Vec<u8> {
        unsafe { self.ring.chunk(idx).to_vec() }
    }
}

impl Drop for RingConsumer {
    fn drop(&mut self) {
        self.ring.consumer_alive.store(false, Ordering::Release);
    }
}

/// Reference channel for the throughput comparison: a one-slot rendezvous
/// guarded by a mutex and condvars, copying each message twice (caller to
/// shared buffer, shared buffer to caller). This is the "obvious" way to
/// move bytes between two threads and the ring is measured against it.
pub mod baseline {
    use std::sync::{Arc, Condvar, Mutex};

    struct SlotBuf {
        data: Vec<u8>,
        len: usize,
        occupied: bool,
        closed: bool,
    }

    struct Shared {
        slot: Mutex<SlotBuf>,
        ready: Condvar,
        space: Condvar,
    }

    pub struct BaselineSender {
        shared: Arc<Shared>,
    }

    pub struct BaselineReceiver {
        shared: Arc<Shared>,
    }

    /// One-slot rendezvous channel able to carry payloads up to `max_len`.
    pub fn channel(max_len: usize) -> (BaselineSender, BaselineReceiver) {
        let shared = Arc::new(Shared {
            slot: Mutex::new(SlotBuf {
                data: vec![0; max_len],
                len: 0,
                occupied: false,
                closed: false,
            }),
            ready: Condvar::new(),
            space: Condvar::new(),
        });
        (
            BaselineSender {
                shared: Arc::clone(&shared),
            },
            BaselineReceiver { shared },
        )
    }

    impl BaselineSender {
        /// Blocks until the slot is free, then copies the payload in.
        pub fn send(&self, payload: &[u8]) -> Result<(), ()> {
            let mut slot = self.shared.slot.lock().unwrap();
            while slot.occupied && !slot.closed {
                slot = self.shared.space.wait(slot).unwrap();
            }
            if slot.closed {
                return Err(());
            }
            slot.data[..payload.len()].copy_from_slice(payload);
            slot.len = payload.len();
            slot.occupied = true;
            self.shared.ready.notify_one();
            Ok(())
        }
    }

    impl Drop for BaselineSender {
        fn drop(&mut self) {
            let mut slot = self.shared.slot.lock().unwrap();
            slot.closed = true;
            self.shared.ready.notify_one();
        }
    }

    impl BaselineReceiver {
        /// Blocks for the next message and copies it out. `None` after the
        /// sender closes and the slot drains.
        pub fn recv(&self) -> Option<Vec<u8>> {
            let mut slot = self.shared.slot.lock().unwrap();
            while !slot.occupied {
                if slot.closed {
                    return None;
                }
                slot = self.shared.ready.wait(slot).unwrap();
            }
            let out = slot.data[..slot.len].to_vec();
            slot.occupied = false;
            self.shared.space.notify_one();
            Some(out)
        }
    }

    impl Drop for BaselineReceiver {
        fn drop(&mut self) {
            let mut slot = self.shared.slot.lock().unwrap();
            slot.closed = true;
            self.shared.space.notify_one();
        }
    }
}

/// Timed producer/consumer drives for comparing the ring against the
/// rendezvous baseline under an identical payload stream. Each payload
/// carries its sequence number in the first eight bytes, and the consumer
/// checks every one, so a measurement that loses or reorders a message
/// panics instead of reporting a number.
pub mod bench {
    use std::thread;
    use std::time::Instant;

    use super::{baseline, ring, RingConfig};

    /// Messages per second through the ring for `messages` payloads of
    /// `payload_len` bytes (at least 8, for the sequence stamp).
    pub fn ring_throughput(config: RingConfig, payload_len: usize, messages: u64) -> f64 {
        assert!(payload_len >= 8);
        let (mut tx, mut rx) = ring(config);
        let start = Instant::now();
        let producer = thread::spawn(move || {
            let mut payload = vec![0u8; payload_len];
            for seq in 0..messages {
                payload[..8].copy_from_slice(&seq.to_be_bytes());
                tx.push(&payload).expect("consumer stays alive");
            }
        });
        for expect in 0..messages {
            let msg = rx.pop().expect("producer sends every message");
            let body = msg.payload();
            assert_eq!(body.len(), payload_len, "payload arrived torn");
            let seq = u64::from_be_bytes(body[..8].try_into().unwrap());
            assert_eq!(seq, expect, "message lost or reordered");
        }
        producer.join().unwrap();
        messages as f64 / start.elapsed().as_secs_f64().max(1e-9)
    }

    /// Messages per second through the rendezvous baseline for the same
    /// stream [`ring_throughput`] uses.
    pub fn baseline_throughput(payload_len: usize, messages: u64) -> f64 {
        assert!(payload_len >= 8);
        let (tx, rx) = baseline::channel(payload_len);
        let start = Instant::now();
        let producer = thread::spawn(move || {
            let mut payload = vec![0u8; payload_len];
            for seq in 0..messages {
                payload[..8].copy_from_slice(&seq.to_be_bytes());
                tx.send(&payload).expect("receiver stays alive");
            }
        });
        for expect in 0..messages {
            let body = rx.recv().expect("sender sends every message");
            assert_eq!(body.len(), payload_len, "payload arrived torn");
            let seq = u64::from_be_bytes(body[..8].try_into().unwrap());
            assert_eq!(seq, expect, "message lost or reordered");
        }
        producer.join().unwrap();
        messages as f64 / start.elapsed().as_secs_f64().max(1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_ring(capacity: usize) -> (RingProducer, RingConsumer) {
        ring(RingConfig {
            capacity,
            chunk_size: 64,
            poison_on_free: false,
        })
    }

    #[test]
    fn fifo_order_preserved() {
        let (mut tx, mut rx) = small_ring(8);
        for i in 0u32..8 {
            tx.try_push(&i.to_be_bytes()).unwrap();
        }
        for i in 0u32..8 {
            let msg = rx.try_pop().expect("message ready");
            assert_eq!(&*msg, i.to_be_bytes());
        }
        assert!(rx.try_pop().is_none());
    }

    #[test]
    fn full_ring_rejects_push() {
        let (mut tx, mut rx) = small_ring(4);
        for i in 0u8..4 {
            tx.try_push(&[i]).unwrap();
        }
        assert_eq!(tx.try_push(&[9]), Err(PushError::Full));
        drop(rx.try_pop().unwrap());
        tx.try_push(&[9]).unwrap();
    }

    #[test]
    #[should_panic(expected = "power of two")]
    fn non_power_of_two_capacity_panics() {
        let _ = small_ring(6);
    }

    #[test]
    fn wraparound_many_laps() {
        let (mut tx, mut rx) = small_ring(4);
        for lap in 0u32..1000 {
            tx.try_push(&lap.to_be_bytes()).unwrap();
            let msg = rx.try_pop().unwrap();
            assert_eq!(&*msg, lap.to_be_bytes());
        }
    }

    #[test]
    fn oversize_payload_spills_and_round_trips() {
        let (mut tx, mut rx) = small_ring(4);
        let big = vec![0xabu8; 1000]; // chunk is 64
        tx.try_push(&big).unwrap();
        assert_eq!(tx.spill_count(), 1);
        let msg = rx.try_pop().unwrap();
        assert_eq!(&*msg, &big[..]);
    }

    #[test]
    fn zero_length_payload_ok() {
        let (mut tx, mut rx) = small_ring(4);
        tx.try_push(b"").unwrap();
        assert_eq!(&*rx.try_pop().unwrap(), b"");
    }

    #[test]
    fn poison_scribbles_released_chunk() {
        let (mut tx, mut rx) = ring(RingConfig {
            capacity: 4,
            chunk_size: 16,
            poison_on_free: true,
        });
        tx.try_push(b"sensitive").unwrap();
        drop(rx.try_pop().unwrap());
        assert_eq!(rx.chunk_snapshot(0), vec![POISON_BYTE; 16]);
    }

    #[test]
    fn consumer_drop_disconnects_producer() {
        let (mut tx, rx) = small_ring(4);
        drop(rx);
        assert_eq!(tx.try_push(b"x"), Err(PushError::Disconnected));
        assert_eq!(tx.push(b"x"), Err(PushError::Disconnected));
    }

    #[test]
    fn producer_drop_lets_consumer_drain_then_end() {
        let (mut tx, mut rx) = small_ring(4);
        tx.try_push(b"last").unwrap();
        drop(tx);
        assert_eq!(&*rx.pop().unwrap(), b"last");
        assert!(rx.pop().is_none());
    }

    #[test]
    fn cross_thread_transfer_with_checksums() {
        // Smaller sibling of the acceptance-level million-message run.
        const N: u64 = 100_000;
        let (mut tx, mut rx) = ring(RingConfig::default());
        let producer = std::thread::spawn(move || {
            let mut payload = [0u8; 32];
            for i in 0..N {
                payload[..8].copy_from_slice(&i.to_be_bytes());
                let sum = payload[..24].iter().map(|&b| b as u64).sum::<u64>();
                payload[24..].copy_from_slice(&sum.to_be_bytes());
                tx.push(&payload).unwrap();
            }
        });
        let mut received = 0u64;
        while let Some(msg) = rx.pop() {
            let i = u64::from_be_bytes(msg[..8].try_into().unwrap());
            assert_eq!(i, received);
            let sum = msg[..24].iter().map(|&b| b as u64).sum::<u64>();
            assert_eq!(sum, u64::from_be_bytes(msg[24..32].try_into().unwrap()));
            received += 1;
        }
        producer.join().unwrap();
        assert_eq!(received, N);
    }

    #[test]
    fn baseline_channel_round_trips() {
        let (tx, rx) = baseline::channel(256);
        let producer = std::thread::spawn(move || {
            for i in 0u32..500 {
                tx.send(&i.to_be_bytes()).unwrap();
            }
        });
        for i in 0u32..500 {
            assert_eq!(rx.recv().unwrap(), i.to_be_bytes());
        }
        producer.join().unwrap();
        assert!(rx.recv().is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn arbitrary_payload_sizes_survive(
            payloads in proptest::collection::vec(
                proptest::collection::vec(any::<u8>(), 0..200), 1..50)
        ) {
            // chunk_size 64: sizes span in-chunk, boundary, and spill cases.
            let (mut tx, mut rx) = small_ring(8);
            let mut queue = std::collections::VecDeque::new();
            for p in &payloads {
                if tx.try_push(p).is_err() {
                    let expected: Vec<u8> = queue.pop_front().unwrap();
                    prop_assert_eq!(rx.try_pop().unwrap().to_vec(), expected);
                    tx.try_push(p).unwrap();
                }
                queue.push_back(p.clone());
            }
            while let Some(expected) = queue.pop_front() {
                prop_assert_eq!(rx.try_pop().unwrap().to_vec(), expected);
            }
        }
    }
}
