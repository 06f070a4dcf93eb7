//! Cache-line volatility model for `strict` arenas.
//!
//! The model mirrors the persistence semantics of CPU caches over PMEM:
//! stores land in a working image and become durable only after an explicit
//! flush of their 64-byte line followed by a fence. A fence applies the
//! pending line flushes to the durable image *in flush order*, so a simulated
//! crash exposes exactly a prefix of the fenced line-flush history. Crash
//! points are expressed as "freeze the durable image after the k-th line
//! persist", which lets fuzzers enumerate every prefix deterministically.

use std::collections::HashSet;

pub const LINE_SIZE: usize = 64;

/// One flushed-but-not-yet-fenced line, with its content snapshotted at
/// flush time. Stores issued between the flush and the fence are *not*
/// included, which is the conservative reading of real hardware.
struct PendingLine {
    line: u32,
    bytes: [u8; LINE_SIZE],
}

pub(crate) struct LineTracker {
    durable: Vec<u8>,
    dirty: HashSet<u32>,
    pending: Vec<PendingLine>,
    persists: u64,
    crash_at: Option<u64>,
    frozen: bool,
}

impl LineTracker {
    pub fn new(durable: Vec<u8>) -> Self {
        LineTracker {
            durable,
            dirty: HashSet::new(),
            pending: Vec::new(),
            persists: 0,
            crash_at: None,
            frozen: false,
        }
    }

    fn lines(start: u64, len: u64) -> std::ops::RangeInclusive<u32> {
        let first = (start / LINE_SIZE as u64) as u32;
        let last = ((start + len.max(1) - 1) / LINE_SIZE as u64) as u32;
        first..=last
    }

    pub fn mark_dirty(&mut self, start: u64, len: u64) {
        if len == 0 {
            return;
        }
        for line in Self::lines(start, len) {
            self.dirty.insert(line);
        }
    }

    /// Move dirty lines in the range into the pending set, snapshotting their
    /// working-image content. Clean lines are skipped.
    pub fn flush_range(&mut self, working: &[u8], start: u64, len: u64) {
        if len == 0 {
            return;
        }
        for line in Self::lines(start, len) {
            if self.dirty.remove(&line) {
                let off = line as usize * LINE_SIZE;
                let mut bytes = [0u8; LINE_SIZE];
                bytes.copy_from_slice(&working[off..off + LINE_SIZE]);
                self.pending.push(PendingLine { line, bytes });
            }
        }
    }

    /// Apply pending line flushes to the durable image, in flush order.
    /// Stops applying once the configured crash point is reached.
    pub fn fence(&mut self) -> u64 {
        let mut applied = 0;
        for p in self.pending.drain(..) {
            if self.frozen {
                continue;
            }
            if let Some(k) = self.crash_at {
                if self.persists >= k {
                    self.frozen = true;
                    continue;
                }
            }
            let off = p.line as usize * LINE_SIZE;
            self.durable[off..off + LINE_SIZE].copy_from_slice(&p.bytes);
            self.persists += 1;
            applied += 1;
        }
        applied
    }

    pub fn set_crash_point(&mut self, after_persists: u64) {
        self.crash_at = Some(after_persists);
        if self.persists >= after_persists {
            self.frozen = true;
        }
    }

    pub fn persists(&self) -> u64 {
        self.persists
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn durable_image(&self) -> Vec<u8> {
        self.durable.clone()
    }

    /// Flush every dirty line and fence, ignoring any crash point. Used for
    /// clean shutdown only.
    pub fn checkpoint(&mut self, working: &[u8]) {
        let dirty: Vec<u32> = self.dirty.drain().collect();
        for line in dirty {
            let off = line as usize * LINE_SIZE;
            let mut bytes = [0u8; LINE_SIZE];
            bytes.copy_from_slice(&working[off..off + LINE_SIZE]);
            self.pending.push(PendingLine { line, bytes });
        }
        for p in self.pending.drain(..) {
            let off = p.line as usize * LINE_SIZE;
            self.durable[off..off + LINE_SIZE].copy_from_slice(&p.bytes);
            self.persists += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Shadow model: durable state is a map of fenced line writes applied in
    /// order, independent of the tracker's internals.
    #[derive(Default)]
    struct Shadow {
        durable: HashMap<u32, [u8; LINE_SIZE]>,
        dirty: HashMap<u32, ()>,
        pending: Vec<(u32, [u8; LINE_SIZE])>,
    }

    impl Shadow {
        fn write(&mut self, line: u32) {
            self.dirty.insert(line, ());
        }
        fn flush(&mut self, working: &[u8], line: u32) {
            if self.dirty.remove(&line).is_some() {
                let off = line as usize * LINE_SIZE;
                let mut b = [0u8; LINE_SIZE];
                b.copy_from_slice(&working[off..off + LINE_SIZE]);
                self.pending.push((line, b));
            }
        }
        fn fence(&mut self) {
            for (line, b) in self.pending.drain(..) {
                self.durable.insert(line, b);
            }
        }
        fn image(&self, base: &[u8]) -> Vec<u8> {
            let mut img = base.to_vec();
            for (line, b) in &self.durable {
                let off = *line as usize * LINE_SIZE;
                img[off..off + LINE_SIZE].copy_from_slice(b);
            }
            img
        }
    }

    proptest! {
        #[test]
        fn tracker_matches_shadow(ops in proptest::collection::vec((0u8..3, 0u32..8, any::<u8>()), 0..200)) {
            let base = vec![0u8; 8 * LINE_SIZE];
            let mut working = base.clone();
            let mut tracker = LineTracker::new(base.clone());
            let mut shadow = Shadow::default();
            for (kind, line, val) in ops {
                match kind {
                    0 => {
                        let off = line as usize * LINE_SIZE;
                        working[off] = val;
                        tracker.mark_dirty(off as u64, 1);
                        shadow.write(line);
                    }
                    1 => {
                        tracker.flush_range(&working, line as u64 * LINE_SIZE as u64, LINE_SIZE as u64);
                        shadow.flush(&working, line);
                    }
                    _ => {
                        tracker.fence();
                        shadow.fence();
                    }
                }
            }
            prop_assert_eq!(tracker.durable_image(), shadow.image(&base));
        }
    }

    #[test]
    fn crash_point_freezes_prefix() {
        let base = vec![0u8; 4 * LINE_SIZE];
        let mut working = base.clone();
        let mut t = LineTracker::new(base);
        t.set_crash_point(2);
        for line in 0..3u64 {
            working[line as usize * LINE_SIZE] = 0xAB;
            t.mark_dirty(line * LINE_SIZE as u64, 1);
            t.flush_range(&working, line * LINE_SIZE as u64, LINE_SIZE as u64);
        }
        t.fence();
        let img = t.durable_image();
        assert_eq!(img[0], 0xAB);
        assert_eq!(img[LINE_SIZE], 0xAB);
        assert_eq!(img[2 * LINE_SIZE], 0, "third flush is past the crash point");
        assert!(t.frozen());
    }
}
