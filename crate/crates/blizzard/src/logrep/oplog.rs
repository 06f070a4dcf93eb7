//! Persistent circular operations log (the queue `Q`) plus the RAFT
//! metadata block.
//!
//! Slots hold entry offsets in arrival order and are append-only; the tail
//! moves forward only through garbage collection of a fully-processed prefix.
//! Raft-level truncation does not rewrite slots — superseded entries stay in
//! the queue flagged FAILED_REPLICATION and are dequeued (with an error
//! response) by the scheduler, which is what lets replication and execution
//! share one buffer.
//!
//! Meta block layout: `current_term u64 | voted_for u64 (MAX = none) |
//! tail_pos u64 | head_pos u64 | last_gc_index u64 | last_gc_term u64 |
//! capacity u64`.

use crate::error::{Error, Result};
use crate::pheap::{Arena, PHandle, ROOT_OPLOG, ROOT_RAFT_META};

const META_TERM: u64 = 0;
const META_VOTED: u64 = 8;
const META_TAIL: u64 = 16;
const META_HEAD: u64 = 24;
const META_GC_INDEX: u64 = 32;
const META_GC_TERM: u64 = 40;
const META_CAP: u64 = 48;
const META_LEN: u64 = 56;

pub const NO_VOTE: u64 = u64::MAX;

pub struct OpLog {
    meta: PHandle,
    slots: PHandle,
    cap: u64,
    tail: u64,
    head: u64,
}

impl OpLog {
    pub fn create(arena: &Arena, capacity: u64) -> Result<OpLog> {
        if capacity == 0 || !capacity.is_power_of_two() {
            return Err(Error::ConfigInvalid(
                "log capacity must be a power of two".into(),
            ));
        }
        let meta = arena.alloc(META_LEN)?;
        let slots = arena.alloc(capacity * 8)?;
        arena.write_u64(meta, META_VOTED, NO_VOTE)?;
        arena.write_u64(meta, META_CAP, capacity)?;
        arena.flush(meta, 0, META_LEN)?;
        arena.fence();
        arena.set_root(ROOT_RAFT_META, meta)?;
        arena.set_root(ROOT_OPLOG, slots)?;
        Ok(OpLog {
            meta,
            slots,
            cap: capacity,
            tail: 0,
            head: 0,
        })
    }

    pub fn open(arena: &Arena) -> Result<OpLog> {
        let meta = arena.root(ROOT_RAFT_META)?;
        let slots = arena.root(ROOT_OPLOG)?;
        if meta.is_null() || slots.is_null() {
            return Err(Error::CorruptQueue("oplog roots missing".into()));
        }
        let cap = arena.read_u64(meta, META_CAP)?;
        if cap == 0 || !cap.is_power_of_two() {
            return Err(Error::CorruptQueue(format!("bad capacity {cap}")));
        }
        let tail = arena.read_u64(meta, META_TAIL)?;
        let head = arena.read_u64(meta, META_HEAD)?;
        if head < tail || head - tail > cap {
            return Err(Error::CorruptQueue(format!(
                "positions out of order: tail {tail} head {head}"
            )));
        }
        Ok(OpLog {
            meta,
            slots,
            cap,
            tail,
            head,
        })
    }

    pub fn capacity(&self) -> u64 {
        self.cap
    }

    pub fn tail(&self) -> u64 {
        self.tail
    }

    pub fn head(&self) -> u64 {
        self.head
    }

    pub fn len(&self) -> u64 {
        self.head - self.tail
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.cap
    }

    /// Append an entry offset. Slot and head are flushed in that order, so a
    /// durable head implies a durable slot; the caller fences the batch.
    pub fn push(&mut self, arena: &Arena, entry_off: u64) -> Result<u64> {
        if self.is_full() {
            return Err(Error::LogFull);
        }
        let pos = self.head;
        let slot_off = (pos % self.cap) * 8;
        arena.write_u64(self.slots, slot_off, entry_off)?;
        arena.flush(self.slots, slot_off, 8)?;
        self.head = pos + 1;
        arena.write_u64(self.meta, META_HEAD, self.head)?;
        arena.flush(self.meta, META_HEAD, 8)?;
        Ok(pos)
    }

    pub fn entry_off_at(&self, arena: &Arena, pos: u64) -> Result<u64> {
        if pos < self.tail || pos >= self.head {
            return Err(Error::CorruptQueue(format!(
                "position {pos} outside [{}, {})",
                self.tail, self.head
            )));
        }
        arena.read_u64(self.slots, (pos % self.cap) * 8)
    }

    /// Persist the new tail (and the gc watermark) before the caller frees
    /// the reclaimed entries, so a crash mid-gc never leaves a freed entry
    /// reachable from the durable queue.
    pub fn advance_tail(&mut self, arena: &Arena, new_tail: u64, gc_index: u64, gc_term: u64) -> Result<()> {
        debug_assert!(new_tail >= self.tail && new_tail <= self.head);
        self.tail = new_tail;
        arena.write_u64(self.meta, META_TAIL, new_tail)?;
        arena.write_u64(self.meta, META_GC_INDEX, gc_index)?;
        arena.write_u64(self.meta, META_GC_TERM, gc_term)?;
        arena.flush(self.meta, META_TAIL, 32)?;
        arena.fence();
        Ok(())
    }

    pub fn gc_watermark(&self, arena: &Arena) -> Result<(u64, u64)> {
        Ok((
            arena.read_u64(self.meta, META_GC_INDEX)?,
            arena.read_u64(self.meta, META_GC_TERM)?,
        ))
    }

    pub fn current_term(&self, arena: &Arena) -> Result<u64> {
        arena.read_u64(self.meta, META_TERM)
    }

    pub fn voted_for(&self, arena: &Arena) -> Result<Option<u64>> {
        let v = arena.read_u64(self.meta, META_VOTED)?;
        Ok(if v == NO_VOTE { None } else { Some(v) })
    }

    /// Durably record term and vote before any message that depends on them
    /// leaves the node.
    pub fn set_term_voted(&self, arena: &Arena, term: u64, voted: Option<u64>) -> Result<()> {
        arena.write_u64(self.meta, META_TERM, term)?;
        arena.write_u64(self.meta, META_VOTED, voted.unwrap_or(NO_VOTE))?;
        arena.flush(self.meta, META_TERM, 16)?;
        arena.fence();
        Ok(())
    }
}
