//! Simulated persistent-memory arena.
//!
//! The arena is a fixed-capacity byte image backed by a heap file. All
//! persistent state — the header, the root table, allocator metadata and the
//! data region — lives inside the image, and everything in the data region is
//! addressed by [`PHandle`] offsets rather than virtual addresses, so
//! reopening the file after a restart needs no pointer remapping.
//!
//! Two modes share one API:
//!
//! * `Strict` tracks 64-byte-line volatility (see [`lines`]): a store is
//!   durable only after `flush` + `fence`, and a simulated crash discards
//!   everything else. Single-threaded; used by crash-consistency tests.
//! * `Fast` treats the working image as durable and reduces flush/fence to
//!   counters; used by benchmarks and the protocol simulator.
//!
//! Heap file format (little-endian): magic `BLZHEAP1`, version u32, capacity
//! u64, incarnation u64, root table of 16 u64 data-relative offsets,
//! allocator metadata, then the data region at byte 4096.

mod alloc;
mod lines;

pub use lines::LINE_SIZE;

use crate::error::{Error, Result};
use lines::LineTracker;
use parking_lot::Mutex;
use std::cell::UnsafeCell;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};

pub const MAGIC: &[u8; 8] = b"BLZHEAP1";
pub const VERSION: u32 = 1;
pub const MIN_CAPACITY: u64 = 1 << 20;
pub const ROOT_SLOTS: usize = 16;

/// Start of the data region within the image. PHandle offsets are relative
/// to this point.
pub const DATA_START: u64 = 4096;
/// First 64 bytes of the data region are reserved so that offset 0 can serve
/// as the null handle.
const DATA_RESERVED: u64 = 64;

const ABS_VERSION: u64 = 8;
const ABS_CAPACITY: u64 = 16;
const ABS_INCARNATION: u64 = 24;
const ABS_ROOTS: u64 = 32;
pub(crate) const ABS_BUMP: u64 = 160;
pub(crate) const ABS_FREE_HEADS: u64 = 168;

/// Well-known root table indices.
pub const ROOT_RAFT_META: usize = 0;
pub const ROOT_OPLOG: usize = 1;
pub const ROOT_SERVICE: usize = 2;
pub const ROOT_TX_TABLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArenaMode {
    Strict,
    Fast,
}

/// Stable reference into the arena's data region. The offset is the
/// persistent form (what gets stored in roots and in data-structure fields);
/// the generation pins the handle to one arena incarnation so stale handles
/// from before a restart are rejected instead of silently misread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PHandle {
    off: u64,
    gen: u64,
}

impl PHandle {
    pub const NULL: PHandle = PHandle { off: 0, gen: 0 };

    pub fn is_null(&self) -> bool {
        self.off == 0
    }

    /// The persistent representation: byte offset from the data-region start.
    pub fn offset(&self) -> u64 {
        self.off
    }

    pub fn generation(&self) -> u64 {
        self.gen
    }
}

pub struct Arena {
    image: UnsafeCell<Box<[u8]>>,
    capacity: u64,
    incarnation: u64,
    mode: ArenaMode,
    path: Option<PathBuf>,
    strict: Option<Mutex<LineTracker>>,
    pub(crate) alloc_lock: Mutex<()>,
    flushes: AtomicU64,
    fences: AtomicU64,
}

// SAFETY: the image is raw shared memory. Allocation metadata is serialized
// by `alloc_lock`, flag bytes go through atomics, and plain reads/writes to
// overlapping data ranges must be excluded by callers (user locks), which is
// the documented contract of this module.
unsafe impl Sync for Arena {}
unsafe impl Send for Arena {}

impl std::fmt::Debug for Arena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Arena")
            .field("capacity", &self.capacity)
            .field("incarnation", &self.incarnation)
            .field("mode", &self.mode)
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

impl Arena {
    /// Create a fresh arena backed by a new heap file.
    pub fn create(path: impl AsRef<Path>, capacity: u64, mode: ArenaMode) -> Result<Arena> {
        let arena = Self::create_in_memory(capacity, mode)?;
        let arena = Arena {
            path: Some(path.as_ref().to_path_buf()),
            ..arena
        };
        std::fs::write(path, arena.working_image())?;
        Ok(arena)
    }

    /// Create a fresh arena with no file binding (tests, simulator nodes).
    pub fn create_in_memory(capacity: u64, mode: ArenaMode) -> Result<Arena> {
        if capacity < MIN_CAPACITY {
            return Err(Error::CapacityTooSmall {
                got: capacity,
                min: MIN_CAPACITY,
            });
        }
        let mut image = vec![0u8; capacity as usize];
        image[..8].copy_from_slice(MAGIC);
        image[ABS_VERSION as usize..ABS_VERSION as usize + 4].copy_from_slice(&VERSION.to_le_bytes());
        image[ABS_CAPACITY as usize..ABS_CAPACITY as usize + 8].copy_from_slice(&capacity.to_le_bytes());
        image[ABS_INCARNATION as usize..ABS_INCARNATION as usize + 8].copy_from_slice(&1u64.to_le_bytes());
        image[ABS_BUMP as usize..ABS_BUMP as usize + 8].copy_from_slice(&DATA_RESERVED.to_le_bytes());
        let strict = match mode {
            ArenaMode::Strict => Some(Mutex::new(LineTracker::new(image.clone()))),
            ArenaMode::Fast => None,
        };
        Ok(Arena {
            image: UnsafeCell::new(image.into_boxed_slice()),
            capacity,
            incarnation: 1,
            mode,
            path: None,
            strict,
            alloc_lock: Mutex::new(()),
            flushes: AtomicU64::new(0),
            fences: AtomicU64::new(0),
        })
    }

    /// Open an existing heap file: validate the header, durably bump the
    /// incarnation counter, and expose all previously flushed data.
    pub fn open(path: impl AsRef<Path>, mode: ArenaMode) -> Result<Arena> {
        let bytes = std::fs::read(&path)?;
        let mut arena = Self::open_image(bytes, mode)?;
        arena.path = Some(path.as_ref().to_path_buf());
        std::fs::write(path, arena.working_image())?;
        Ok(arena)
    }

    /// Open from an in-memory image (e.g. a crash-simulation durable image).
    pub fn open_image(bytes: Vec<u8>, mode: ArenaMode) -> Result<Arena> {
        if bytes.len() < DATA_START as usize || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: VERSION,
            });
        }
        let capacity = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if capacity != bytes.len() as u64 {
            return Err(Error::ConfigInvalid(format!(
                "heap file length {} does not match header capacity {}",
                bytes.len(),
                capacity
            )));
        }
        let incarnation = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) + 1;
        let strict = match mode {
            ArenaMode::Strict => Some(Mutex::new(LineTracker::new(bytes.clone()))),
            ArenaMode::Fast => None,
        };
        let arena = Arena {
            image: UnsafeCell::new(bytes.into_boxed_slice()),
            capacity,
            incarnation,
            mode,
            path: None,
            strict,
            alloc_lock: Mutex::new(()),
            flushes: AtomicU64::new(0),
            fences: AtomicU64::new(0),
        };
        arena.raw_write_abs(ABS_INCARNATION, &incarnation.to_le_bytes());
        arena.flush_abs(ABS_INCARNATION, 8);
        arena.fence();
        Ok(arena)
    }

    pub fn mode(&self) -> ArenaMode {
        self.mode
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Usable bytes in the data region.
    pub fn data_capacity(&self) -> u64 {
        self.capacity - DATA_START
    }

    pub fn incarnation(&self) -> u64 {
        self.incarnation
    }

    /// Re-mint a handle from its persistent offset form.
    pub fn handle_at(&self, off: u64) -> Result<PHandle> {
        if off == 0 {
            return Ok(PHandle::NULL);
        }
        if off < DATA_RESERVED || off >= self.data_capacity() {
            return Err(Error::InvalidHandle { offset: off });
        }
        Ok(PHandle {
            off,
            gen: self.incarnation,
        })
    }

    pub(crate) fn mint(&self, off: u64) -> PHandle {
        PHandle {
            off,
            gen: self.incarnation,
        }
    }

    // ---- root table ----

    pub fn root(&self, slot: usize) -> Result<PHandle> {
        if slot >= ROOT_SLOTS {
            return Err(Error::InvalidHandle { offset: slot as u64 });
        }
        let off = self.raw_u64_abs(ABS_ROOTS + slot as u64 * 8);
        self.handle_at(off)
    }

    pub fn set_root(&self, slot: usize, h: PHandle) -> Result<()> {
        if slot >= ROOT_SLOTS {
            return Err(Error::InvalidHandle { offset: slot as u64 });
        }
        let abs = ABS_ROOTS + slot as u64 * 8;
        self.raw_write_abs(abs, &h.off.to_le_bytes());
        self.flush_abs(abs, 8);
        self.fence();
        Ok(())
    }

    // ---- data access ----

    fn resolve(&self, h: PHandle, off: u64, len: u64) -> Result<u64> {
        if h.is_null() {
            return Err(Error::InvalidHandle { offset: 0 });
        }
        if h.gen != self.incarnation {
            return Err(Error::StaleHandle {
                handle_gen: h.gen,
                arena_gen: self.incarnation,
            });
        }
        let user_len = self.live_len(h)?;
        if off.checked_add(len).map_or(true, |end| end > user_len) {
            return Err(Error::RangeOutOfBounds {
                offset: off,
                len,
                alloc_len: user_len,
            });
        }
        Ok(DATA_START + h.off + off)
    }

    pub fn read(&self, h: PHandle, off: u64, buf: &mut [u8]) -> Result<()> {
        let abs = self.resolve(h, off, buf.len() as u64)?;
        self.raw_read_abs(abs, buf);
        Ok(())
    }

    pub fn read_vec(&self, h: PHandle, off: u64, len: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len as usize];
        self.read(h, off, &mut buf)?;
        Ok(buf)
    }

    pub fn read_u64(&self, h: PHandle, off: u64) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read(h, off, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn read_u32(&self, h: PHandle, off: u64) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read(h, off, &mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn write(&self, h: PHandle, off: u64, bytes: &[u8]) -> Result<()> {
        let abs = self.resolve(h, off, bytes.len() as u64)?;
        self.raw_write_abs(abs, bytes);
        Ok(())
    }

    pub fn write_u64(&self, h: PHandle, off: u64, v: u64) -> Result<()> {
        self.write(h, off, &v.to_le_bytes())
    }

    pub fn write_u32(&self, h: PHandle, off: u64, v: u32) -> Result<()> {
        self.write(h, off, &v.to_le_bytes())
    }

    /// Borrow a range of an allocation directly from the working image.
    /// Callers must ensure no concurrent writer touches the range for the
    /// lifetime of the borrow; request payloads are write-once, which is the
    /// main use.
    pub fn bytes(&self, h: PHandle, off: u64, len: u64) -> Result<&[u8]> {
        let abs = self.resolve(h, off, len)?;
        let img = unsafe { &*self.image.get() };
        Ok(&img[abs as usize..(abs + len) as usize])
    }

    /// Flush a range of an allocation (marks its lines for the next fence).
    pub fn flush(&self, h: PHandle, off: u64, len: u64) -> Result<()> {
        let abs = self.resolve(h, off, len)?;
        self.flush_abs(abs, len);
        Ok(())
    }

    pub fn fence(&self) {
        self.fences.fetch_add(1, Ordering::Relaxed);
        if let Some(t) = &self.strict {
            t.lock().fence();
        }
    }

    // ---- single-byte flags (atomic; used for OpState and gc flags) ----

    pub fn flag_load(&self, h: PHandle, off: u64) -> Result<u8> {
        let abs = self.resolve(h, off, 1)?;
        let img = unsafe { (*self.image.get()).as_ptr() };
        let a = unsafe { &*(img.add(abs as usize) as *const AtomicU8) };
        Ok(a.load(Ordering::Acquire))
    }

    pub fn flag_store(&self, h: PHandle, off: u64, v: u8) -> Result<()> {
        let abs = self.resolve(h, off, 1)?;
        let img = unsafe { (*self.image.get()).as_ptr() };
        let a = unsafe { &*(img.add(abs as usize) as *const AtomicU8) };
        a.store(v, Ordering::Release);
        if let Some(t) = &self.strict {
            t.lock().mark_dirty(abs, 1);
        }
        Ok(())
    }

    // ---- crash simulation / durability ----

    /// Freeze the durable image after `after_persists` line-persist events.
    /// Strict mode only; later fences silently stop persisting.
    pub fn set_crash_point(&self, after_persists: u64) {
        if let Some(t) = &self.strict {
            t.lock().set_crash_point(after_persists);
        }
    }

    /// Total line-persist events applied so far (strict mode).
    pub fn persist_events(&self) -> u64 {
        self.strict.as_ref().map_or(0, |t| t.lock().persists())
    }

    pub fn crashed(&self) -> bool {
        self.strict.as_ref().is_some_and(|t| t.lock().frozen())
    }

    /// The durable image: what a restart would observe if the process died
    /// now. In fast mode every store is considered durable.
    pub fn simulate_crash(&self) -> Vec<u8> {
        match &self.strict {
            Some(t) => t.lock().durable_image(),
            None => self.working_image(),
        }
    }

    /// Flush everything and fence, ignoring crash points (clean shutdown).
    pub fn checkpoint(&self) {
        if let Some(t) = &self.strict {
            let img = unsafe { &*self.image.get() };
            t.lock().checkpoint(img);
        }
        self.fences.fetch_add(1, Ordering::Relaxed);
    }

    /// Clean close: checkpoint and write the image back to the heap file.
    pub fn persist_to_file(&self) -> Result<()> {
        self.checkpoint();
        match &self.path {
            Some(p) => {
                std::fs::write(p, self.working_image())?;
                Ok(())
            }
            None => Err(Error::ConfigInvalid("arena has no file binding".into())),
        }
    }

    pub fn flush_count(&self) -> u64 {
        self.flushes.load(Ordering::Relaxed)
    }

    pub fn fence_count(&self) -> u64 {
        self.fences.load(Ordering::Relaxed)
    }

    // ---- raw image access (pub(crate) for the allocator) ----

    fn working_image(&self) -> Vec<u8> {
        unsafe { (*self.image.get()).to_vec() }
    }

    pub(crate) fn raw_read_abs(&self, abs: u64, buf: &mut [u8]) {
        debug_assert!(abs + buf.len() as u64 <= self.capacity);
        let img = unsafe { (*self.image.get()).as_ptr() };
        unsafe {
            std::ptr::copy_nonoverlapping(img.add(abs as usize), buf.as_mut_ptr(), buf.len());
        }
    }

    pub(crate) fn raw_write_abs(&self, abs: u64, bytes: &[u8]) {
        debug_assert!(abs + bytes.len() as u64 <= self.capacity);
        let img = unsafe { (*self.image.get()).as_mut_ptr() };
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), img.add(abs as usize), bytes.len());
        }
        if let Some(t) = &self.strict {
            t.lock().mark_dirty(abs, bytes.len() as u64);
        }
    }

    pub(crate) fn raw_fill_abs(&self, abs: u64, len: u64, byte: u8) {
        debug_assert!(abs + len <= self.capacity);
        let img = unsafe { (*self.image.get()).as_mut_ptr() };
        unsafe {
            std::ptr::write_bytes(img.add(abs as usize), byte, len as usize);
        }
        if let Some(t) = &self.strict {
            t.lock().mark_dirty(abs, len);
        }
    }

    pub(crate) fn raw_u64_abs(&self, abs: u64) -> u64 {
        let mut buf = [0u8; 8];
        self.raw_read_abs(abs, &mut buf);
        u64::from_le_bytes(buf)
    }

    pub(crate) fn raw_u32_abs(&self, abs: u64) -> u32 {
        let mut buf = [0u8; 4];
        self.raw_read_abs(abs, &mut buf);
        u32::from_le_bytes(buf)
    }

    pub(crate) fn flush_abs(&self, abs: u64, len: u64) {
        self.flushes.fetch_add(1, Ordering::Relaxed);
        if let Some(t) = &self.strict {
            let img = unsafe { &*self.image.get() };
            t.lock().flush_range(img, abs, len);
        }
    }

    pub(crate) fn data_abs(&self, off: u64) -> u64 {
        DATA_START + off
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_has_null_roots_and_incarnation_one() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        assert_eq!(a.incarnation(), 1);
        for slot in 0..ROOT_SLOTS {
            assert!(a.root(slot).unwrap().is_null());
        }
    }

    #[test]
    fn create_below_minimum_is_rejected() {
        let err = Arena::create_in_memory(4096, ArenaMode::Fast).unwrap_err();
        assert!(matches!(err, Error::CapacityTooSmall { .. }));
    }

    #[test]
    fn open_bumps_incarnation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heap.img");
        let a = Arena::create(&path, MIN_CAPACITY, ArenaMode::Fast).unwrap();
        drop(a);
        let b = Arena::open(&path, ArenaMode::Fast).unwrap();
        assert_eq!(b.incarnation(), 2);
        drop(b);
        let c = Arena::open(&path, ArenaMode::Fast).unwrap();
        assert_eq!(c.incarnation(), 3);
    }

    #[test]
    fn open_zeros_is_bad_magic() {
        let err = Arena::open_image(vec![0u8; MIN_CAPACITY as usize], ArenaMode::Fast).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
    }

    #[test]
    fn open_wrong_version_is_rejected() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Fast).unwrap();
        let mut img = a.simulate_crash();
        img[8..12].copy_from_slice(&9u32.to_le_bytes());
        let err = Arena::open_image(img, ArenaMode::Fast).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 9, .. }));
    }

    #[test]
    fn root_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heap.img");
        let a = Arena::create(&path, MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let h = a.alloc(32).unwrap();
        a.write(h, 0, b"hello persistent root").unwrap();
        a.flush(h, 0, 32).unwrap();
        a.fence();
        a.set_root(5, h).unwrap();
        a.persist_to_file().unwrap();
        drop(a);

        let b = Arena::open(&path, ArenaMode::Strict).unwrap();
        let h2 = b.root(5).unwrap();
        assert_eq!(h2.offset(), h.offset());
        assert_eq!(&b.read_vec(h2, 0, 21).unwrap(), b"hello persistent root");
    }

    #[test]
    fn unflushed_writes_are_lost_on_crash() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let h = a.alloc(64).unwrap();
        a.set_root(0, h).unwrap();
        a.write(h, 0, b"volatile").unwrap();
        // no flush, no fence
        let img = a.simulate_crash();
        let b = Arena::open_image(img, ArenaMode::Strict).unwrap();
        let h2 = b.root(0).unwrap();
        assert_eq!(b.read_vec(h2, 0, 8).unwrap(), vec![0u8; 8]);
    }

    #[test]
    fn flushed_and_fenced_writes_survive_crash() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let h = a.alloc(64).unwrap();
        a.set_root(0, h).unwrap();
        a.write(h, 0, b"durable!").unwrap();
        a.flush(h, 0, 8).unwrap();
        a.fence();
        let b = Arena::open_image(a.simulate_crash(), ArenaMode::Strict).unwrap();
        let h2 = b.root(0).unwrap();
        assert_eq!(&b.read_vec(h2, 0, 8).unwrap(), b"durable!");
    }

    #[test]
    fn partial_flush_survives_exactly() {
        // three lines written, two flushed: exactly the flushed two survive
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let h = a.alloc(4 * LINE_SIZE as u64).unwrap();
        a.set_root(0, h).unwrap();
        // align the writes to line boundaries so the outcome is byte-exact
        let abs = DATA_START + h.offset();
        let base = (LINE_SIZE as u64 - abs % LINE_SIZE as u64) % LINE_SIZE as u64;
        for i in 0..3u64 {
            a.write(h, base + i * LINE_SIZE as u64, &[i as u8 + 1; LINE_SIZE]).unwrap();
        }
        a.flush(h, base, LINE_SIZE as u64).unwrap();
        a.flush(h, base + 2 * LINE_SIZE as u64, LINE_SIZE as u64).unwrap();
        a.fence();
        let b = Arena::open_image(a.simulate_crash(), ArenaMode::Strict).unwrap();
        let h2 = b.root(0).unwrap();
        assert_eq!(b.read_vec(h2, base, 64).unwrap(), vec![1u8; 64]);
        assert_eq!(b.read_vec(h2, base + 64, 64).unwrap(), vec![0u8; 64], "unflushed line lost");
        assert_eq!(b.read_vec(h2, base + 128, 64).unwrap(), vec![3u8; 64]);
    }

    #[test]
    fn stale_handles_are_rejected_after_reopen() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let h = a.alloc(16).unwrap();
        let b = Arena::open_image(a.simulate_crash(), ArenaMode::Strict).unwrap();
        let err = b.read_u64(h, 0).unwrap_err();
        assert!(matches!(err, Error::StaleHandle { .. }));
    }

    #[test]
    fn out_of_bounds_access_is_rejected() {
        let a = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Fast).unwrap();
        let h = a.alloc(16).unwrap();
        assert!(matches!(
            a.write(h, 12, &[0u8; 8]).unwrap_err(),
            Error::RangeOutOfBounds { .. }
        ));
        assert!(matches!(
            a.read_u64(h, 16).unwrap_err(),
            Error::RangeOutOfBounds { .. }
        ));
    }
}
