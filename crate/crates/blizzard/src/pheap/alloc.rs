//! Size-class free-list allocator with a bump region.
//!
//! Allocator metadata (bump cursor, per-class free-list heads) lives in the
//! arena image, so it shares the crash model with the data it manages. Every
//! block carries a 16-byte header (state, class, user length) in front of the
//! user region; freed blocks reuse their first 8 user bytes as the free-list
//! link.
//!
//! Crash safety relies on flush ordering, not on extra fences: header and
//! content are flushed before the metadata word that publishes them, so a
//! crash mid-operation can leak a block but never double-allocate or corrupt
//! the lists.

use super::{Arena, PHandle, ABS_BUMP, ABS_FREE_HEADS};
use crate::error::{Error, Result};
use std::collections::HashSet;

pub(crate) const HEADER_SIZE: u64 = 16;
const MIN_CLASS_SHIFT: u32 = 4; // 16 bytes
const MAX_CLASS_SHIFT: u32 = 26; // 64 MiB
pub(crate) const NUM_CLASSES: usize = (MAX_CLASS_SHIFT - MIN_CLASS_SHIFT + 1) as usize;

const STATE_ALLOCATED: u32 = 0xA11C_0C0D;
const STATE_FREE: u32 = 0xF4EE_0BAD;

fn class_for(size: u64) -> Option<(u32, u64)> {
    let want = size.max(1 << MIN_CLASS_SHIFT);
    let shift = 64 - (want - 1).leading_zeros().min(64 - MIN_CLASS_SHIFT);
    let shift = shift.max(MIN_CLASS_SHIFT);
    if shift > MAX_CLASS_SHIFT {
        return None;
    }
    Some((shift - MIN_CLASS_SHIFT, 1u64 << shift))
}

impl Arena {
    /// Allocate a zeroed region and make the allocation durable (internal
    /// flush + fence).
    pub fn alloc(&self, size: u64) -> Result<PHandle> {
        let h = self.alloc_batched(size)?;
        self.fence();
        Ok(h)
    }

    /// Allocate without the trailing fence. Callers batching several
    /// allocations fence once before publishing any of them.
    pub fn alloc_batched(&self, size: u64) -> Result<PHandle> {
        if size == 0 {
            return Err(Error::InvalidHandle { offset: 0 });
        }
        let (class_idx, class_size) =
            class_for(size).ok_or(Error::OutOfSpace { requested: size })?;
        let _g = self.alloc_lock.lock();

        let head_abs = ABS_FREE_HEADS + class_idx as u64 * 8;
        let head = self.raw_u64_abs(head_abs);
        let user_off = if head != 0 {
            // Pop from the free list: unlink first, then mark allocated.
            // A crash in between leaks the block; it is off the list and its
            // header still reads FREE, so nothing ever hands it out again.
            let next = self.raw_u64_abs(self.data_abs(head));
            self.raw_write_abs(head_abs, &next.to_le_bytes());
            self.flush_abs(head_abs, 8);
            head
        } else {
            let cursor = self.raw_u64_abs(ABS_BUMP);
            let block_end = cursor
                .checked_add(HEADER_SIZE + class_size)
                .ok_or(Error::OutOfSpace { requested: size })?;
            if block_end > self.data_capacity() {
                return Err(Error::OutOfSpace { requested: size });
            }
            cursor + HEADER_SIZE
        };

        let hdr_abs = self.data_abs(user_off - HEADER_SIZE);
        self.raw_write_abs(hdr_abs, &STATE_ALLOCATED.to_le_bytes());
        self.raw_write_abs(hdr_abs + 4, &class_idx.to_le_bytes());
        self.raw_write_abs(hdr_abs + 8, &size.to_le_bytes());
        self.raw_fill_abs(self.data_abs(user_off), size, 0);
        self.flush_abs(hdr_abs, HEADER_SIZE);
        self.flush_abs(self.data_abs(user_off), size);
        if head == 0 {
            // Publish the bump cursor only after header and zeroes.
            let new_cursor = user_off + class_size;
            self.raw_write_abs(ABS_BUMP, &new_cursor.to_le_bytes());
            self.flush_abs(ABS_BUMP, 8);
        }
        Ok(self.mint(user_off))
    }

    /// Return a live allocation to its size-class free list.
    pub fn free(&self, h: PHandle) -> Result<()> {
        self.free_batched(h)?;
        self.fence();
        Ok(())
    }

    /// Free without the trailing fence; callers reclaiming many blocks fence
    /// once. Flush ordering (state, link, head) keeps every crash prefix at
    /// worst a leak.
    pub fn free_batched(&self, h: PHandle) -> Result<()> {
        if h.is_null() {
            return Err(Error::InvalidHandle { offset: 0 });
        }
        if h.gen != self.incarnation {
            return Err(Error::StaleHandle {
                handle_gen: h.gen,
                arena_gen: self.incarnation,
            });
        }
        let _g = self.alloc_lock.lock();
        let (state, class_idx, _) = self.header_fields(h.off)?;
        match state {
            STATE_ALLOCATED => {}
            STATE_FREE => return Err(Error::DoubleFree { offset: h.off }),
            _ => return Err(Error::InvalidHandle { offset: h.off }),
        }
        let hdr_abs = self.data_abs(h.off - HEADER_SIZE);
        let head_abs = ABS_FREE_HEADS + class_idx as u64 * 8;
        let head = self.raw_u64_abs(head_abs);
        // Order: mark free, link, then publish as the new head. Any crash
        // prefix leaks the block at worst.
        self.raw_write_abs(hdr_abs, &STATE_FREE.to_le_bytes());
        self.flush_abs(hdr_abs, 4);
        self.raw_write_abs(self.data_abs(h.off), &head.to_le_bytes());
        self.flush_abs(self.data_abs(h.off), 8);
        self.raw_write_abs(head_abs, &h.off.to_le_bytes());
        self.flush_abs(head_abs, 8);
        Ok(())
    }

    /// Requested length of a live allocation.
    pub(crate) fn live_len(&self, h: PHandle) -> Result<u64> {
        let (state, _, user_len) = self.header_fields(h.off)?;
        if state != STATE_ALLOCATED {
            return Err(Error::InvalidHandle { offset: h.off });
        }
        Ok(user_len)
    }

    fn header_fields(&self, user_off: u64) -> Result<(u32, u32, u64)> {
        if user_off < super::DATA_RESERVED + HEADER_SIZE || user_off >= self.data_capacity() {
            return Err(Error::InvalidHandle { offset: user_off });
        }
        let hdr_abs = self.data_abs(user_off - HEADER_SIZE);
        let state = self.raw_u32_abs(hdr_abs);
        let class_idx = self.raw_u32_abs(hdr_abs + 4);
        let user_len = self.raw_u64_abs(hdr_abs + 8);
        if class_idx as usize >= NUM_CLASSES {
            return Err(Error::InvalidHandle { offset: user_off });
        }
        Ok((state, class_idx, user_len))
    }

    /// Structural scan of allocator metadata: bounds, free-list link and
    /// header sanity, cycle and cross-list duplicate detection. Run after
    /// recovery; leaks are legal, corruption is not.
    pub fn self_check(&self) -> Result<()> {
        let _g = self.alloc_lock.lock();
        let cursor = self.raw_u64_abs(ABS_BUMP);
        if cursor < super::DATA_RESERVED || cursor > self.data_capacity() {
            return Err(Error::AllocatorCorrupt(format!(
                "bump cursor {cursor} out of range"
            )));
        }
        let mut seen: HashSet<u64> = HashSet::new();
        for class_idx in 0..NUM_CLASSES {
            let class_size = 1u64 << (class_idx as u32 + MIN_CLASS_SHIFT);
            let mut off = self.raw_u64_abs(ABS_FREE_HEADS + class_idx as u64 * 8);
            let mut steps = 0u64;
            while off != 0 {
                if !seen.insert(off) {
                    return Err(Error::AllocatorCorrupt(format!(
                        "block {off} linked twice in free lists"
                    )));
                }
                if off < super::DATA_RESERVED + HEADER_SIZE
                    || off + class_size > cursor
                {
                    return Err(Error::AllocatorCorrupt(format!(
                        "free block {off} outside allocated space"
                    )));
                }
                let (state, idx, _) = self.header_fields(off)?;
                if state != STATE_FREE {
                    return Err(Error::AllocatorCorrupt(format!(
                        "free-list block {off} has state {state:#x}"
                    )));
                }
                if idx as usize != class_idx {
                    return Err(Error::AllocatorCorrupt(format!(
                        "free-list block {off} in class {class_idx} has class {idx}"
                    )));
                }
                off = self.raw_u64_abs(self.data_abs(off));
                steps += 1;
                if steps > self.data_capacity() / (HEADER_SIZE + (1 << MIN_CLASS_SHIFT)) {
                    return Err(Error::AllocatorCorrupt(format!(
                        "free list for class {class_idx} does not terminate"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bytes remaining in the bump region (diagnostic).
    pub fn bump_remaining(&self) -> u64 {
        let cursor = self.raw_u64_abs(ABS_BUMP);
        self.data_capacity().saturating_sub(cursor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pheap::{Arena, ArenaMode, MIN_CAPACITY};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_rounding() {
        assert_eq!(class_for(1), Some((0, 16)));
        assert_eq!(class_for(16), Some((0, 16)));
        assert_eq!(class_for(17), Some((1, 32)));
        assert_eq!(class_for(8192), Some((9, 8192)));
        assert_eq!(class_for(1 << 26), Some((22, 1 << 26)));
        assert_eq!(class_for((1 << 26) + 1), None);
    }

    #[test]
    fn alloc_returns_zeroed_region() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let h = a.alloc(64).unwrap();
        assert_eq!(a.read_vec(h, 0, 64).unwrap(), vec![0u8; 64]);
        // dirty it, free, realloc: still zeroed
        a.write(h, 0, &[0xFF; 64]).unwrap();
        a.free(h).unwrap();
        let h2 = a.alloc(64).unwrap();
        assert_eq!(h2.offset(), h.offset(), "size-class free list reuses the block");
        assert_eq!(a.read_vec(h2, 0, 64).unwrap(), vec![0u8; 64]);
    }

    #[test]
    fn exhaustion_reports_out_of_space() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Fast).unwrap();
        let mut n = 0;
        loop {
            match a.alloc(4096) {
                Ok(_) => n += 1,
                Err(Error::OutOfSpace { .. }) => break,
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        assert!(n > 200, "expected a few hundred 4K allocations, got {n}");
    }

    #[test]
    fn free_of_null_and_double_free_are_errors() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Fast).unwrap();
        assert!(matches!(
            a.free(PHandle::NULL).unwrap_err(),
            Error::InvalidHandle { .. }
        ));
        let h = a.alloc(32).unwrap();
        a.free(h).unwrap();
        assert!(matches!(a.free(h).unwrap_err(), Error::DoubleFree { .. }));
    }

    #[test]
    fn use_after_free_is_rejected() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Fast).unwrap();
        let h = a.alloc(32).unwrap();
        a.free(h).unwrap();
        assert!(a.read_u64(h, 0).is_err());
        assert!(a.write_u64(h, 0, 1).is_err());
    }

    /// Crash fuzzer: random alloc/free/write traffic, crash at a random
    /// persist point, reopen, and verify (a) the allocator self-check passes
    /// and (b) blocks freed before the crash are never handed out twice
    /// (alloc after recovery never returns an offset overlapping a block the
    /// durable image still considers allocated and reachable).
    #[test]
    fn allocator_crash_fuzz() {
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
            // dry run to learn the persist-event budget for this seed
            let mut live: Vec<PHandle> = Vec::new();
            let script: Vec<(u8, u64)> = (0..200)
                .map(|_| (rng.random_range(0u8..3), rng.random_range(16u64..512)))
                .collect();
            for (op, size) in &script {
                match op {
                    0 | 1 => {
                        if let Ok(h) = a.alloc(*size) {
                            live.push(h);
                        }
                    }
                    _ => {
                        if !live.is_empty() {
                            let idx = rng.random_range(0..live.len());
                            a.free(live.swap_remove(idx)).unwrap();
                        }
                    }
                }
            }
            let budget = a.persist_events();

            // crashed run
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crash_at = rng.random_range(0..budget.max(1));
            let b = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
            b.set_crash_point(crash_at);
            let mut live: Vec<PHandle> = Vec::new();
            for (op, size) in &script {
                match op {
                    0 | 1 => {
                        if let Ok(h) = b.alloc(*size) {
                            live.push(h);
                        }
                    }
                    _ => {
                        if !live.is_empty() {
                            let idx = rng.random_range(0..live.len());
                            b.free(live.swap_remove(idx)).unwrap();
                        }
                    }
                }
            }

            let img = b.simulate_crash();
            let c = Arena::open_image(img, ArenaMode::Strict).unwrap();
            c.self_check().unwrap();

            // allocations after recovery never overlap blocks that are still
            // durably allocated
            let mut durably_allocated: Vec<(u64, u64)> = Vec::new();
            let cursor = c.raw_u64_abs(ABS_BUMP);
            let mut off = super::super::DATA_RESERVED + HEADER_SIZE;
            while off + HEADER_SIZE <= cursor {
                match c.header_fields(off) {
                    Ok((state, class_idx, _)) => {
                        let class_size = 1u64 << (class_idx + MIN_CLASS_SHIFT);
                        if state == STATE_ALLOCATED {
                            durably_allocated.push((off, class_size));
                        }
                        if state == STATE_ALLOCATED || state == STATE_FREE {
                            off += HEADER_SIZE + class_size;
                            continue;
                        }
                    }
                    Err(_) => {}
                }
                // torn header: rest of the bump region was never published
                break;
            }
            for _ in 0..50 {
                let h = c.alloc(64).unwrap();
                for (orig, class_size) in &durably_allocated {
                    let no_overlap =
                        h.offset() + 64 <= *orig || h.offset() >= orig + class_size;
                    assert!(
                        no_overlap,
                        "seed {seed}: new alloc {} overlaps durable block {orig}",
                        h.offset()
                    );
                }
            }
            c.self_check().unwrap();
        }
    }
}
