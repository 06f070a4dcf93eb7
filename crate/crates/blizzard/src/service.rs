//! The service contract: request handler, commutativity predicate, and
//! delayed lock release.
//!
//! A service owns one persistent structure in the arena and exposes it as
//! binary request/response blobs. Handlers run inside a failure-atomic
//! transaction; any locks they take must be wrapped in [`DelayedLock`]s and
//! pushed onto the [`LockSet`] rather than released — the runtime releases
//! them only after the transaction commits, which serializes conflicting
//! commutative operations (the counter-increment case) and keeps recovery
//! sound.
//!
//! Application-level errors travel inside the response blob (first byte is a
//! status from [`status`]); transport-level status is separate.

use crate::error::Result;
use crate::patomic::{TxManager, TxToken};
use crate::pheap::{Arena, PHandle};
use parking_lot::lock_api::ArcMutexGuard;
use parking_lot::RawMutex;
use rand_chacha::ChaCha8Rng;

/// Application status bytes (first byte of every response blob).
pub mod status {
    pub const OK: u8 = 0;
    pub const NOT_FOUND: u8 = 1;
    pub const EXISTS: u8 = 2;
    pub const MISSING: u8 = 3;
    pub const UNKNOWN_ARTICLE: u8 = 4;
    pub const MALFORMED: u8 = 5;
    /// Re-sent acknowledgment for an operation that completed before a
    /// crash; the original payload was not persisted.
    pub const APPLIED: u8 = 6;
    /// Handler failed after its retry; no persistent effect.
    pub const FAILED: u8 = 7;
}

/// A user lock held through transaction commit. Release happens exactly
/// once, driven by the runtime, on the thread that ran the handler.
pub trait DelayedLock {
    fn release(self: Box<Self>);
}

/// Owned guard over a volatile `parking_lot` mutex, the stock lock wrapper
/// services use.
pub struct MutexDelayedLock {
    guard: Option<ArcMutexGuard<RawMutex, ()>>,
}

impl MutexDelayedLock {
    pub fn new(guard: ArcMutexGuard<RawMutex, ()>) -> Self {
        MutexDelayedLock { guard: Some(guard) }
    }
}

impl DelayedLock for MutexDelayedLock {
    fn release(mut self: Box<Self>) {
        self.guard.take();
    }
}

/// Locks acquired by a handler, released by the runtime in acquisition
/// order after commit.
#[derive(Default)]
pub struct LockSet {
    locks: Vec<Box<dyn DelayedLock>>,
}

impl LockSet {
    pub fn new() -> LockSet {
        LockSet::default()
    }

    pub fn push(&mut self, lock: Box<dyn DelayedLock>) {
        self.locks.push(lock);
    }

    pub fn len(&self) -> usize {
        self.locks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locks.is_empty()
    }

    pub fn release_all(&mut self) {
        for l in self.locks.drain(..) {
            l.release();
        }
    }
}

/// Handler-side view of the transactional arena.
pub struct ExecCtx<'a> {
    pub arena: &'a Arena,
    mgr: &'a TxManager,
    tx: &'a mut TxToken,
}

impl<'a> ExecCtx<'a> {
    pub fn new(arena: &'a Arena, mgr: &'a TxManager, tx: &'a mut TxToken) -> Self {
        ExecCtx { arena, mgr, tx }
    }

    pub fn write(&mut self, h: PHandle, off: u64, bytes: &[u8]) -> Result<()> {
        self.mgr.write(self.arena, self.tx, h, off, bytes)
    }

    pub fn write_u64(&mut self, h: PHandle, off: u64, v: u64) -> Result<()> {
        self.mgr.write_u64(self.arena, self.tx, h, off, v)
    }

    pub fn write_u32(&mut self, h: PHandle, off: u64, v: u32) -> Result<()> {
        self.mgr.write_u32(self.arena, self.tx, h, off, v)
    }

    /// Allocate inside the transaction. If the transaction aborts the block
    /// leaks, which the arena tolerates; it is never resurrected.
    pub fn alloc(&mut self, size: u64) -> Result<PHandle> {
        self.arena.alloc(size)
    }

    /// Initialize a block allocated in this same transaction. No undo record
    /// is needed (nothing reaches the block until a logged link write commits)
    /// but the content is flushed so it persists before any link to it.
    pub fn write_fresh(&mut self, h: PHandle, off: u64, bytes: &[u8]) -> Result<()> {
        self.arena.write(h, off, bytes)?;
        self.arena.flush(h, off, bytes.len() as u64)
    }

    pub fn write_fresh_u64(&mut self, h: PHandle, off: u64, v: u64) -> Result<()> {
        self.write_fresh(h, off, &v.to_le_bytes())
    }

    /// Free at commit time (aborts keep the block).
    pub fn free(&mut self, h: PHandle) -> Result<()> {
        self.mgr.defer_free(self.arena, self.tx, h)
    }

    pub fn read_u64(&self, h: PHandle, off: u64) -> Result<u64> {
        self.arena.read_u64(h, off)
    }

    pub fn read_u32(&self, h: PHandle, off: u64) -> Result<u32> {
        self.arena.read_u32(h, off)
    }

    pub fn read_vec(&self, h: PHandle, off: u64, len: u64) -> Result<Vec<u8>> {
        self.arena.read_vec(h, off, len)
    }
}

/// An in-memory reference model of a service, used by model-based oracles
/// (randomized equivalence and crash-fuzz comparison).
pub trait RefModel: Send {
    /// Apply one request and return the response blob the service would
    /// produce.
    fn apply(&mut self, request: &[u8]) -> Vec<u8>;
    /// Canonical dump of logical state for equality comparison.
    fn digest(&self) -> Vec<u8>;
}

/// A data-structure service: codec, handler, commutativity predicate and
/// the introspection hooks the test harnesses need.
pub trait Service: Send + Sync {
    fn name(&self) -> &'static str;

    /// Create the structure's roots in a fresh arena.
    fn init(&self, arena: &Arena) -> Result<()>;

    /// Handle one request. Runs inside a failure-atomic transaction on an
    /// executor thread; locks go into `locks`, never released here.
    fn handle(
        &self,
        ctx: &mut ExecCtx<'_>,
        request: &[u8],
        locks: &mut LockSet,
        response: &mut Vec<u8>,
    ) -> Result<()>;

    /// The commutativity callback. Must be symmetric; registration samples
    /// random pairs to reject asymmetric predicates.
    fn commutes(&self, a: &[u8], b: &[u8]) -> bool;

    /// True if the request does not mutate state (routed as a read RPC).
    fn is_read(&self, request: &[u8]) -> bool;

    /// Draw a random well-formed request (used by the symmetry check and by
    /// randomized oracles).
    fn sample_request(&self, rng: &mut ChaCha8Rng) -> Vec<u8>;

    /// Structural invariant scan after recovery. Returns violations; never
    /// mutates.
    fn recover_check(&self, arena: &Arena) -> Result<Vec<String>>;

    /// Canonical dump of logical state, comparable with a model's digest
    /// and across replicas.
    fn state_digest(&self, arena: &Arena) -> Result<Vec<u8>>;

    /// Fresh reference model of this service's semantics.
    fn new_model(&self) -> Box<dyn RefModel>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use parking_lot::Mutex;
    use std::sync::Arc;

    #[test]
    fn lockset_releases_in_acquisition_order() {
        use std::sync::atomic::{AtomicU64, Ordering};
        static SEQ: AtomicU64 = AtomicU64::new(0);

        struct Probe {
            id: u64,
            order: Arc<Mutex<Vec<(u64, u64)>>>,
        }
        impl DelayedLock for Probe {
            fn release(self: Box<Self>) {
                let at = SEQ.fetch_add(1, Ordering::Relaxed);
                self.order.lock().push((self.id, at));
            }
        }

        let order = Arc::new(Mutex::new(Vec::new()));
        let mut set = LockSet::new();
        for id in 0..3 {
            set.push(Box::new(Probe {
                id,
                order: order.clone(),
            }));
        }
        set.release_all();
        let got = order.lock().clone();
        assert_eq!(got.len(), 3);
        assert!(got.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    }

    #[test]
    fn mutex_delayed_lock_releases_on_release_only() {
        let m = Arc::new(Mutex::new(()));
        let guard = m.lock_arc();
        let mut set = LockSet::new();
        set.push(Box::new(MutexDelayedLock::new(guard)));
        assert!(m.try_lock().is_none(), "still held while in the set");
        set.release_all();
        assert!(m.try_lock().is_some(), "released after release_all");
    }
}
