//! Failure-atomic transactions over the arena.
//!
//! Each transaction owns a slot in a fixed 64-entry table stored in the
//! arena. Before the first overwriting store to any range, the range's
//! pre-image is appended to the slot's persistent undo chain and fenced;
//! commit flushes the written ranges, fences, and then durably marks the slot
//! COMMITTED — the single atomicity point. A slot found ACTIVE at recovery is
//! rolled back by replaying its chain newest-first; a slot found COMMITTED
//! just has its chain reclaimed. Rollback is idempotent under repeated
//! crashes because the chain head is advanced (and fenced) only after a
//! record's pre-image has been restored and fenced.
//!
//! Frees inside a transaction are deferred to commit so that an abort can
//! never resurrect a block the structure still references. Allocations made
//! in an aborted transaction leak, which the arena tolerates by design.
//!
//! Undo record layout (user bytes of its allocation, little-endian):
//! `alloc_off u64 | field_off u64 | len u64 | next u64 | prior bytes`.

use crate::error::{Error, Result};
use crate::pheap::{Arena, PHandle, ROOT_TX_TABLE};
use parking_lot::Mutex;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

const NSLOTS: usize = 64;
const SLOT_SIZE: u64 = 24;
const SLOT_STATE: u64 = 0;
const SLOT_TXID: u64 = 8;
const SLOT_UNDO: u64 = 16;

const STATE_FREE: u64 = 0;
const STATE_ACTIVE: u64 = 1;
const STATE_COMMITTED: u64 = 2;

const REC_ALLOC_OFF: u64 = 0;
const REC_FIELD_OFF: u64 = 8;
const REC_LEN: u64 = 16;
const REC_NEXT: u64 = 24;
const REC_PRIOR: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenState {
    Active,
    Committed,
    Aborted,
}

/// A live transaction. Confined to one thread; the table slot it occupies is
/// returned to the pool at commit or abort.
pub struct TxToken {
    slot: usize,
    tx_id: u64,
    state: TokenState,
    /// Ranges logged so far: (data-relative start, len, handle, field offset).
    logged: Vec<(u64, u64, PHandle, u64)>,
    deferred_free: Vec<PHandle>,
    undo_records: u64,
}

impl TxToken {
    pub fn id(&self) -> u64 {
        self.tx_id
    }

    pub fn is_active(&self) -> bool {
        self.state == TokenState::Active
    }

    /// Number of undo records created (first-write-wins makes this smaller
    /// than the number of writes).
    pub fn undo_records(&self) -> u64 {
        self.undo_records
    }

    fn slot_off(slot: usize, field: u64) -> u64 {
        slot as u64 * SLOT_SIZE + field
    }
}

pub struct TxManager {
    table: PHandle,
    pool: Mutex<Vec<usize>>,
    next_tx: AtomicU64,
    /// Test hook for crash-fuzzer sanity: skip the undo-record fence so the
    /// detectors have a real bug to find.
    skip_undo_flush: AtomicBool,
}

impl TxManager {
    /// Allocate the transaction table in a fresh arena and claim its root.
    pub fn create(arena: &Arena) -> Result<TxManager> {
        let table = arena.alloc(NSLOTS as u64 * SLOT_SIZE)?;
        arena.set_root(ROOT_TX_TABLE, table)?;
        Ok(Self::with_table(arena, table))
    }

    /// Bind to the table of a recovered arena. [`recover_transactions`] must
    /// have run first.
    pub fn open(arena: &Arena) -> Result<TxManager> {
        let table = arena.root(ROOT_TX_TABLE)?;
        if table.is_null() {
            return Err(Error::CorruptUndoChain("transaction table missing".into()));
        }
        Ok(Self::with_table(arena, table))
    }

    fn with_table(arena: &Arena, table: PHandle) -> TxManager {
        TxManager {
            table,
            pool: Mutex::new((0..NSLOTS).rev().collect()),
            next_tx: AtomicU64::new(arena.incarnation() << 32),
            skip_undo_flush: AtomicBool::new(false),
        }
    }

    pub fn set_skip_undo_flush(&self, skip: bool) {
        self.skip_undo_flush.store(skip, Ordering::Relaxed);
    }

    pub fn begin(&self, arena: &Arena) -> Result<TxToken> {
        let slot = self.pool.lock().pop().ok_or(Error::TxTableFull)?;
        let tx_id = self.next_tx.fetch_add(1, Ordering::Relaxed) + 1;
        let h = self.table;
        // Publish tx_id and an empty chain before the ACTIVE state so a torn
        // slot can never pair ACTIVE with a stale chain head.
        arena.write_u64(h, TxToken::slot_off(slot, SLOT_TXID), tx_id)?;
        arena.write_u64(h, TxToken::slot_off(slot, SLOT_UNDO), 0)?;
        arena.flush(h, TxToken::slot_off(slot, SLOT_TXID), 16)?;
        arena.write_u64(h, TxToken::slot_off(slot, SLOT_STATE), STATE_ACTIVE)?;
        arena.flush(h, TxToken::slot_off(slot, SLOT_STATE), 8)?;
        arena.fence();
        Ok(TxToken {
            slot,
            tx_id,
            state: TokenState::Active,
            logged: Vec::new(),
            deferred_free: Vec::new(),
            undo_records: 0,
        })
    }

    /// Log the pre-image of `[off, off+bytes.len())` in `h` (unless an
    /// earlier record already covers it) and apply the store to the working
    /// image. The undo record is flushed and fenced before the store.
    pub fn write(
        &self,
        arena: &Arena,
        tx: &mut TxToken,
        h: PHandle,
        off: u64,
        bytes: &[u8],
    ) -> Result<()> {
        if !tx.is_active() {
            return Err(Error::TxNotActive);
        }
        if bytes.is_empty() {
            return Ok(());
        }
        self.log_range(arena, tx, h, off, bytes.len() as u64)?;
        arena.write(h, off, bytes)
    }

    pub fn write_u64(
        &self,
        arena: &Arena,
        tx: &mut TxToken,
        h: PHandle,
        off: u64,
        v: u64,
    ) -> Result<()> {
        self.write(arena, tx, h, off, &v.to_le_bytes())
    }

    pub fn write_u32(
        &self,
        arena: &Arena,
        tx: &mut TxToken,
        h: PHandle,
        off: u64,
        v: u32,
    ) -> Result<()> {
        self.write(arena, tx, h, off, &v.to_le_bytes())
    }

    /// Undo-logged single-byte store through the arena's atomic flag path,
    /// for flag bytes that other threads read concurrently.
    pub fn write_flag(
        &self,
        arena: &Arena,
        tx: &mut TxToken,
        h: PHandle,
        off: u64,
        v: u8,
    ) -> Result<()> {
        if !tx.is_active() {
            return Err(Error::TxNotActive);
        }
        self.log_range(arena, tx, h, off, 1)?;
        arena.flag_store(h, off, v)
    }

    fn log_range(&self, arena: &Arena, tx: &mut TxToken, h: PHandle, off: u64, len: u64) -> Result<()> {
        let start = h.offset() + off;
        if tx
            .logged
            .iter()
            .any(|(s, l, _, _)| start >= *s && start + len <= *s + *l)
        {
            return Ok(());
        }
        let prior = arena.read_vec(h, off, len)?;
        let rec = arena.alloc_batched(REC_PRIOR + len)?;
        arena.write_u64(rec, REC_ALLOC_OFF, h.offset())?;
        arena.write_u64(rec, REC_FIELD_OFF, off)?;
        arena.write_u64(rec, REC_LEN, len)?;
        let prev_head = arena.read_u64(self.table, TxToken::slot_off(tx.slot, SLOT_UNDO))?;
        arena.write_u64(rec, REC_NEXT, prev_head)?;
        arena.write(rec, REC_PRIOR, &prior)?;
        if !self.skip_undo_flush.load(Ordering::Relaxed) {
            arena.flush(rec, 0, REC_PRIOR + len)?;
            arena.fence();
        }
        arena.write_u64(self.table, TxToken::slot_off(tx.slot, SLOT_UNDO), rec.offset())?;
        arena.flush(self.table, TxToken::slot_off(tx.slot, SLOT_UNDO), 8)?;
        arena.fence();
        tx.logged.push((start, len, h, off));
        tx.undo_records += 1;
        Ok(())
    }

    /// Free `h` when (and only when) this transaction commits.
    pub fn defer_free(&self, arena: &Arena, tx: &mut TxToken, h: PHandle) -> Result<()> {
        if !tx.is_active() {
            return Err(Error::TxNotActive);
        }
        // validate liveness now so the caller learns about bad handles early
        arena.read_vec(h, 0, 0)?;
        if tx.deferred_free.contains(&h) {
            return Err(Error::DoubleFree { offset: h.offset() });
        }
        tx.deferred_free.push(h);
        Ok(())
    }

    /// Flush written ranges, fence, durably mark COMMITTED, reclaim the undo
    /// chain, run deferred frees, release the slot.
    pub fn commit(&self, arena: &Arena, tx: &mut TxToken) -> Result<()> {
        if !tx.is_active() {
            return Err(Error::TxNotActive);
        }
        for (_, len, h, off) in &tx.logged {
            arena.flush(*h, *off, *len)?;
        }
        arena.fence();
        arena.write_u64(self.table, TxToken::slot_off(tx.slot, SLOT_STATE), STATE_COMMITTED)?;
        arena.flush(self.table, TxToken::slot_off(tx.slot, SLOT_STATE), 8)?;
        arena.fence();
        tx.state = TokenState::Committed;

        reclaim_chain(arena, self.table, tx.slot)?;
        clear_slot(arena, self.table, tx.slot)?;
        for h in tx.deferred_free.drain(..) {
            arena.free(h)?;
        }
        self.pool.lock().push(tx.slot);
        Ok(())
    }

    /// Roll the transaction back immediately (handler failure path). The
    /// arena state is restored from the undo chain exactly as recovery would.
    pub fn abort(&self, arena: &Arena, tx: &mut TxToken) -> Result<()> {
        if !tx.is_active() {
            return Err(Error::TxNotActive);
        }
        rollback_chain(arena, self.table, tx.slot)?;
        clear_slot(arena, self.table, tx.slot)?;
        tx.state = TokenState::Aborted;
        tx.deferred_free.clear();
        self.pool.lock().push(tx.slot);
        Ok(())
    }
}

/// Roll back every transaction that was ACTIVE when the previous incarnation
/// died and reclaim the chains of COMMITTED ones. Must run once at startup,
/// before any scheduler activity. Returns the number of rolled-back
/// transactions.
pub fn recover_transactions(arena: &Arena) -> Result<u64> {
    let table = arena.root(ROOT_TX_TABLE)?;
    if table.is_null() {
        return Ok(0);
    }
    let mut rolled_back = 0;
    for slot in 0..NSLOTS {
        let state = arena.read_u64(table, TxToken::slot_off(slot, SLOT_STATE))?;
        match state {
            STATE_FREE => {}
            STATE_ACTIVE => {
                rollback_chain(arena, table, slot)?;
                clear_slot(arena, table, slot)?;
                rolled_back += 1;
            }
            STATE_COMMITTED => {
                reclaim_chain(arena, table, slot)?;
                clear_slot(arena, table, slot)?;
            }
            other => {
                return Err(Error::CorruptUndoChain(format!(
                    "slot {slot} has state {other}"
                )));
            }
        }
    }
    Ok(rolled_back)
}

/// Restore pre-images newest-first. After each record is applied and fenced,
/// the chain head is advanced and fenced, then the record freed — so a crash
/// at any point leaves a shorter chain whose replay finishes the job.
fn rollback_chain(arena: &Arena, table: PHandle, slot: usize) -> Result<()> {
    loop {
        let head = arena.read_u64(table, TxToken::slot_off(slot, SLOT_UNDO))?;
        if head == 0 {
            return Ok(());
        }
        let rec = arena.handle_at(head)?;
        let (alloc_off, field_off, len, next) = read_record(arena, rec)?;
        let target = arena.handle_at(alloc_off)?;
        let prior = arena.read_vec(rec, REC_PRIOR, len)?;
        arena.write(target, field_off, &prior)?;
        arena.flush(target, field_off, len)?;
        arena.fence();
        arena.write_u64(table, TxToken::slot_off(slot, SLOT_UNDO), next)?;
        arena.flush(table, TxToken::slot_off(slot, SLOT_UNDO), 8)?;
        arena.fence();
        arena.free(rec)?;
    }
}

/// Free the records of a chain whose transaction already committed.
fn reclaim_chain(arena: &Arena, table: PHandle, slot: usize) -> Result<()> {
    loop {
        let head = arena.read_u64(table, TxToken::slot_off(slot, SLOT_UNDO))?;
        if head == 0 {
            return Ok(());
        }
        let rec = arena.handle_at(head)?;
        let next = arena.read_u64(rec, REC_NEXT)?;
        arena.write_u64(table, TxToken::slot_off(slot, SLOT_UNDO), next)?;
        arena.flush(table, TxToken::slot_off(slot, SLOT_UNDO), 8)?;
        arena.fence();
        arena.free(rec)?;
    }
}

fn clear_slot(arena: &Arena, table: PHandle, slot: usize) -> Result<()> {
    arena.write_u64(table, TxToken::slot_off(slot, SLOT_STATE), STATE_FREE)?;
    arena.write_u64(table, TxToken::slot_off(slot, SLOT_TXID), 0)?;
    arena.flush(table, TxToken::slot_off(slot, SLOT_STATE), 16)?;
    arena.fence();
    Ok(())
}

fn read_record(arena: &Arena, rec: PHandle) -> Result<(u64, u64, u64, u64)> {
    let alloc_off = arena.read_u64(rec, REC_ALLOC_OFF)?;
    let field_off = arena.read_u64(rec, REC_FIELD_OFF)?;
    let len = arena.read_u64(rec, REC_LEN)?;
    let next = arena.read_u64(rec, REC_NEXT)?;
    // a record claiming more prior bytes than its allocation holds is
    // structurally corrupt
    arena
        .read_vec(rec, REC_PRIOR, len)
        .map_err(|_| Error::CorruptUndoChain(format!("record at {} truncated", rec.offset())))?;
    Ok((alloc_off, field_off, len, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pheap::{ArenaMode, MIN_CAPACITY};

    fn fresh() -> (Arena, TxManager) {
        let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let mgr = TxManager::create(&arena).unwrap();
        (arena, mgr)
    }

    #[test]
    fn empty_tx_commits_as_noop() {
        let (arena, mgr) = fresh();
        let mut tx = mgr.begin(&arena).unwrap();
        mgr.commit(&arena, &mut tx).unwrap();
        assert_eq!(recover_transactions(&arena).unwrap(), 0);
    }

    #[test]
    fn sequential_txs_get_distinct_ids() {
        let (arena, mgr) = fresh();
        let mut a = mgr.begin(&arena).unwrap();
        let id_a = a.id();
        mgr.commit(&arena, &mut a).unwrap();
        let mut b = mgr.begin(&arena).unwrap();
        assert_ne!(id_a, b.id());
        mgr.commit(&arena, &mut b).unwrap();
    }

    #[test]
    fn begin_then_crash_recovers_to_empty_table() {
        let (arena, mgr) = fresh();
        let _tx = mgr.begin(&arena).unwrap();
        let img = arena.simulate_crash();
        let arena2 = Arena::open_image(img, ArenaMode::Strict).unwrap();
        assert_eq!(recover_transactions(&arena2).unwrap(), 1);
        assert_eq!(recover_transactions(&arena2).unwrap(), 0, "table now empty");
    }

    #[test]
    fn first_write_wins_logs_once() {
        let (arena, mgr) = fresh();
        let h = arena.alloc(64).unwrap();
        let mut tx = mgr.begin(&arena).unwrap();
        mgr.write(&arena, &mut tx, h, 0, &[1u8; 8]).unwrap();
        mgr.write(&arena, &mut tx, h, 0, &[2u8; 8]).unwrap();
        assert_eq!(tx.undo_records(), 1);
        // contained sub-range also skips
        mgr.write(&arena, &mut tx, h, 2, &[3u8; 4]).unwrap();
        assert_eq!(tx.undo_records(), 1);
        // overlapping-but-not-contained range logs again
        mgr.write(&arena, &mut tx, h, 4, &[4u8; 8]).unwrap();
        assert_eq!(tx.undo_records(), 2);
        mgr.commit(&arena, &mut tx).unwrap();
    }

    #[test]
    fn recommit_is_rejected() {
        let (arena, mgr) = fresh();
        let mut tx = mgr.begin(&arena).unwrap();
        mgr.commit(&arena, &mut tx).unwrap();
        assert!(matches!(
            mgr.commit(&arena, &mut tx).unwrap_err(),
            Error::TxNotActive
        ));
    }

    #[test]
    fn abort_restores_pre_images_in_process() {
        let (arena, mgr) = fresh();
        let h = arena.alloc(64).unwrap();
        arena.write(h, 0, &[7u8; 64]).unwrap();
        arena.flush(h, 0, 64).unwrap();
        arena.fence();
        let mut tx = mgr.begin(&arena).unwrap();
        mgr.write(&arena, &mut tx, h, 8, &[9u8; 16]).unwrap();
        assert_eq!(arena.read_vec(h, 8, 16).unwrap(), vec![9u8; 16]);
        mgr.abort(&arena, &mut tx).unwrap();
        assert_eq!(arena.read_vec(h, 0, 64).unwrap(), vec![7u8; 64]);
    }

    #[test]
    fn deferred_free_applies_only_on_commit() {
        let (arena, mgr) = fresh();
        let a = arena.alloc(32).unwrap();
        let b = arena.alloc(32).unwrap();

        let mut tx = mgr.begin(&arena).unwrap();
        mgr.defer_free(&arena, &mut tx, a).unwrap();
        mgr.abort(&arena, &mut tx).unwrap();
        assert!(arena.read_u64(a, 0).is_ok(), "abort must not free");

        let mut tx = mgr.begin(&arena).unwrap();
        mgr.defer_free(&arena, &mut tx, b).unwrap();
        assert!(arena.read_u64(b, 0).is_ok(), "not freed before commit");
        mgr.commit(&arena, &mut tx).unwrap();
        assert!(arena.read_u64(b, 0).is_err(), "freed at commit");
    }

    /// Run one scripted transaction against a strict arena, crashing after
    /// exactly `crash_at` line persists.
    fn run_scripted(crash_at: Option<u64>) -> (Vec<u8>, Vec<u8>, u64, Arena) {
        let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let mgr = TxManager::create(&arena).unwrap();
        let a = arena.alloc(64).unwrap();
        let b = arena.alloc(96).unwrap();
        arena.write(a, 0, &[0xAA; 64]).unwrap();
        arena.write(b, 0, &[0xBB; 96]).unwrap();
        arena.flush(a, 0, 64).unwrap();
        arena.flush(b, 0, 96).unwrap();
        arena.fence();
        arena.set_root(4, a).unwrap();
        arena.set_root(5, b).unwrap();

        if let Some(k) = crash_at {
            arena.set_crash_point(k);
        }

        let mut tx = mgr.begin(&arena).unwrap();
        mgr.write(&arena, &mut tx, a, 0, &[0x11; 8]).unwrap();
        mgr.write(&arena, &mut tx, b, 40, &[0x22; 16]).unwrap();
        mgr.write(&arena, &mut tx, a, 32, &[0x33; 8]).unwrap();
        mgr.commit(&arena, &mut tx).unwrap();

        let mut pre = vec![0xAAu8; 64];
        pre.extend_from_slice(&[0xBB; 96]);
        let mut post = vec![0x11u8; 8];
        post.extend_from_slice(&[0xAA; 24]);
        post.extend_from_slice(&[0x33; 8]);
        post.extend_from_slice(&[0xAA; 24]);
        post.extend_from_slice(&[0xBB; 40]);
        post.extend_from_slice(&[0x22; 16]);
        post.extend_from_slice(&[0xBB; 40]);
        (pre, post, arena.persist_events(), arena)
    }

    fn observed_state(arena: &Arena) -> Vec<u8> {
        let a = arena.root(4).unwrap();
        let b = arena.root(5).unwrap();
        let mut v = arena.read_vec(a, 0, 64).unwrap();
        v.extend(arena.read_vec(b, 0, 96).unwrap());
        v
    }

    /// Atomicity at every crash point: post-recovery state is either the
    /// transaction's pre-state or its post-state, never a mixture.
    #[test]
    fn exhaustive_crash_points_are_atomic() {
        let (pre, post, budget, _) = run_scripted(None);
        assert_ne!(pre, post);
        let mut saw_pre = false;
        let mut saw_post = false;
        for k in 0..=budget {
            let (_, _, _, arena) = run_scripted(Some(k));
            let img = arena.simulate_crash();
            let arena2 = Arena::open_image(img, ArenaMode::Strict).unwrap();
            recover_transactions(&arena2).unwrap();
            arena2.self_check().unwrap();
            let got = observed_state(&arena2);
            if got == pre {
                saw_pre = true;
            } else if got == post {
                saw_post = true;
            } else {
                panic!("crash point {k}: state is neither pre nor post");
            }
        }
        assert!(saw_pre, "early crash points must roll back");
        assert!(saw_post, "late crash points must keep the commit");
    }

    /// A second crash during recovery must not change the outcome class.
    #[test]
    fn rollback_survives_repeated_crashes() {
        let (pre, post, budget, _) = run_scripted(None);
        for k in (0..=budget).step_by(7) {
            let (_, _, _, arena) = run_scripted(Some(k));
            let img = arena.simulate_crash();

            // crash the recovery itself at a few points, then finish clean
            for j in [0u64, 3, 11] {
                let arena2 = Arena::open_image(img.clone(), ArenaMode::Strict).unwrap();
                arena2.set_crash_point(arena2.persist_events() + j);
                let _ = recover_transactions(&arena2);
                let img2 = arena2.simulate_crash();
                let arena3 = Arena::open_image(img2, ArenaMode::Strict).unwrap();
                recover_transactions(&arena3).unwrap();
                arena3.self_check().unwrap();
                let got = observed_state(&arena3);
                assert!(
                    got == pre || got == post,
                    "crash {k}, recovery crash +{j}: mixed state"
                );
            }
        }
    }

    /// Detector sanity: with undo-record fencing skipped, some crash point
    /// must yield a state that is neither pre nor post.
    #[test]
    fn skipping_undo_flush_is_detected() {
        let run = |crash_at: Option<u64>| {
            let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
            let mgr = TxManager::create(&arena).unwrap();
            mgr.set_skip_undo_flush(true);
            let a = arena.alloc(64).unwrap();
            arena.write(a, 0, &[0xAA; 64]).unwrap();
            arena.flush(a, 0, 64).unwrap();
            arena.fence();
            arena.set_root(4, a).unwrap();
            if let Some(k) = crash_at {
                arena.set_crash_point(k);
            }
            let mut tx = mgr.begin(&arena).unwrap();
            mgr.write(&arena, &mut tx, a, 0, &[0x11; 64]).unwrap();
            mgr.commit(&arena, &mut tx).unwrap();
            arena
        };
        let budget = run(None).persist_events();
        let mut violation = false;
        for k in 0..=budget {
            let arena = run(Some(k));
            let arena2 = Arena::open_image(arena.simulate_crash(), ArenaMode::Strict).unwrap();
            if recover_transactions(&arena2).is_err() {
                violation = true;
                break;
            }
            let a = arena2.root(4).unwrap();
            let got = arena2.read_vec(a, 0, 64).unwrap();
            if got != vec![0xAA; 64] && got != vec![0x11; 64] {
                violation = true;
                break;
            }
        }
        assert!(violation, "injected missing-fence bug must be observable");
    }
}
