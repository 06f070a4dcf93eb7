//! The coupled log entry: one arena allocation per request, shared by
//! replication, queueing and execution.
//!
//! Layout (user bytes, little-endian):
//!
//! ```text
//! 0   state u8        persistent OpState flag
//! 1   gc_flag u8      set once execution (or failure routing) is done
//! 2   kind u8
//! 3   reserved u8
//! 4   payload_len u32
//! 8   term u64
//! 16  index u64       raft index; 0 for reads
//! 24  client_id u64
//! 32  request_id u64
//! 40  payload bytes
//! ```
//!
//! The payload is written exactly once, here; every later stage reads it in
//! place through [`payload`]. The write is counted against the zero-copy
//! instrumentation counter.

use crate::error::Result;
use crate::pheap::{Arena, PHandle};
use std::sync::atomic::{AtomicU64, Ordering};

pub const OFF_STATE: u64 = 0;
pub const OFF_GC: u64 = 1;
pub const OFF_KIND: u64 = 2;
pub const OFF_PAYLOAD_LEN: u64 = 4;
pub const OFF_TERM: u64 = 8;
pub const OFF_INDEX: u64 = 16;
pub const OFF_CLIENT: u64 = 24;
pub const OFF_REQUEST: u64 = 32;
pub const HEADER_LEN: u64 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum OpState {
    Received = 1,
    Replicating = 2,
    Replicated = 3,
    FailedReplication = 4,
    Completed = 5,
}

impl OpState {
    pub fn from_u8(v: u8) -> Option<OpState> {
        match v {
            1 => Some(OpState::Received),
            2 => Some(OpState::Replicating),
            3 => Some(OpState::Replicated),
            4 => Some(OpState::FailedReplication),
            5 => Some(OpState::Completed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Update = 1,
    Read = 2,
    Noop = 3,
    Config = 4,
}

impl Kind {
    pub fn from_u8(v: u8) -> Option<Kind> {
        match v {
            1 => Some(Kind::Update),
            2 => Some(Kind::Read),
            3 => Some(Kind::Noop),
            4 => Some(Kind::Config),
            _ => None,
        }
    }

    pub fn replicated(self) -> bool {
        !matches!(self, Kind::Read)
    }
}

/// Allocate and fill a log entry. Flushes everything but does not fence;
/// appends are published in batches by the caller. `copies` is the zero-copy
/// instrumentation counter: the single payload memcpy below is the one copy a
/// request is allowed on this node.
#[allow(clippy::too_many_arguments)]
pub fn write_new(
    arena: &Arena,
    kind: Kind,
    state: OpState,
    term: u64,
    index: u64,
    client_id: u64,
    request_id: u64,
    payload: &[u8],
    copies: &AtomicU64,
) -> Result<PHandle> {
    let h = arena.alloc_batched(HEADER_LEN + payload.len() as u64)?;
    arena.write(h, OFF_STATE, &[state as u8, 0, kind as u8, 0])?;
    arena.write_u32(h, OFF_PAYLOAD_LEN, payload.len() as u32)?;
    arena.write_u64(h, OFF_TERM, term)?;
    arena.write_u64(h, OFF_INDEX, index)?;
    arena.write_u64(h, OFF_CLIENT, client_id)?;
    arena.write_u64(h, OFF_REQUEST, request_id)?;
    arena.write(h, HEADER_LEN, payload)?;
    copies.fetch_add(1, Ordering::Relaxed);
    if kind.replicated() {
        arena.flush(h, 0, HEADER_LEN + payload.len() as u64)?;
    }
    Ok(h)
}

pub fn state(arena: &Arena, h: PHandle) -> Result<Option<OpState>> {
    Ok(OpState::from_u8(arena.flag_load(h, OFF_STATE)?))
}

/// Volatile flag store; callers flush separately when durability matters.
pub fn set_state(arena: &Arena, h: PHandle, s: OpState) -> Result<()> {
    arena.flag_store(h, OFF_STATE, s as u8)
}

/// Persist both flag bytes (state + gc). One line; caller fences.
pub fn flush_flags(arena: &Arena, h: PHandle) -> Result<()> {
    arena.flush(h, OFF_STATE, 2)
}

pub fn gc_flag(arena: &Arena, h: PHandle) -> Result<bool> {
    Ok(arena.flag_load(h, OFF_GC)? != 0)
}

pub fn set_gc_flag(arena: &Arena, h: PHandle) -> Result<()> {
    arena.flag_store(h, OFF_GC, 1)
}

pub fn kind(arena: &Arena, h: PHandle) -> Result<Option<Kind>> {
    Ok(Kind::from_u8(arena.flag_load(h, OFF_KIND)?))
}

pub fn term(arena: &Arena, h: PHandle) -> Result<u64> {
    arena.read_u64(h, OFF_TERM)
}

pub fn index(arena: &Arena, h: PHandle) -> Result<u64> {
    arena.read_u64(h, OFF_INDEX)
}

pub fn client_id(arena: &Arena, h: PHandle) -> Result<u64> {
    arena.read_u64(h, OFF_CLIENT)
}

pub fn request_id(arena: &Arena, h: PHandle) -> Result<u64> {
    arena.read_u64(h, OFF_REQUEST)
}

pub fn payload_len(arena: &Arena, h: PHandle) -> Result<u32> {
    arena.read_u32(h, OFF_PAYLOAD_LEN)
}

/// Borrow the request payload in place (write-once bytes).
pub fn payload(arena: &Arena, h: PHandle) -> Result<&[u8]> {
    let len = payload_len(arena, h)? as u64;
    arena.bytes(h, HEADER_LEN, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pheap::{ArenaMode, MIN_CAPACITY};

    #[test]
    fn entry_roundtrip() {
        let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let copies = AtomicU64::new(0);
        let h = write_new(
            &arena,
            Kind::Update,
            OpState::Received,
            7,
            42,
            100,
            3,
            b"payload!",
            &copies,
        )
        .unwrap();
        arena.fence();
        assert_eq!(copies.load(Ordering::Relaxed), 1);
        assert_eq!(state(&arena, h).unwrap(), Some(OpState::Received));
        assert_eq!(kind(&arena, h).unwrap(), Some(Kind::Update));
        assert_eq!(term(&arena, h).unwrap(), 7);
        assert_eq!(index(&arena, h).unwrap(), 42);
        assert_eq!(client_id(&arena, h).unwrap(), 100);
        assert_eq!(request_id(&arena, h).unwrap(), 3);
        assert_eq!(payload_len(&arena, h).unwrap(), 8);
        assert_eq!(payload(&arena, h).unwrap(), b"payload!");
        assert!(!gc_flag(&arena, h).unwrap());
    }

    #[test]
    fn entry_survives_crash_after_fence() {
        let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let copies = AtomicU64::new(0);
        let h = write_new(
            &arena,
            Kind::Update,
            OpState::Received,
            1,
            1,
            1,
            1,
            b"must survive",
            &copies,
        )
        .unwrap();
        arena.fence();
        let off = h.offset();
        let img = arena.simulate_crash();
        let arena2 = Arena::open_image(img, ArenaMode::Strict).unwrap();
        let h2 = arena2.handle_at(off).unwrap();
        assert_eq!(payload(&arena2, h2).unwrap(), b"must survive");
        assert_eq!(state(&arena2, h2).unwrap(), Some(OpState::Received));
    }

    #[test]
    fn read_entries_are_not_flushed() {
        let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let copies = AtomicU64::new(0);
        let h = write_new(
            &arena,
            Kind::Read,
            OpState::Received,
            0,
            0,
            1,
            1,
            b"ephemeral",
            &copies,
        )
        .unwrap();
        arena.fence();
        let off = h.offset();
        let arena2 = Arena::open_image(arena.simulate_crash(), ArenaMode::Strict).unwrap();
        let h2 = arena2.handle_at(off).unwrap();
        // the allocation exists (palloc zeroes are fenced) but the header was
        // never flushed, so the entry reads as unwritten
        assert_eq!(arena2.flag_load(h2, OFF_KIND).unwrap(), 0);
    }
}
