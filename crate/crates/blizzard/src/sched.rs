//! Execution layer: the dispatch queue view over the operations log, the
//! ready set `E`, the commutativity scheduler, the failure-atomic executor,
//! and startup recovery.
//!
//! The scheduler only ever considers the queue head. A head that is still
//! REPLICATING (or not yet dispatchable against `E`) blocks everything
//! behind it — that head-of-line ordering is what makes commutative
//! reordering serializable, so there is deliberately no lookahead.
//!
//! Executors run the handler inside a transaction and write the COMPLETED
//! flag as part of that same transaction, making "executed" and "persisted"
//! one atomic event. Delayed locks release after commit; the gc flag is set
//! last. A handler panic rolls the transaction back; the entry is retried
//! once and then completed-with-error so the log can collect it.

use crate::error::Result;
use crate::logrep::entry::{self, Kind, OpState};
use crate::logrep::RaftCore;
use crate::patomic::TxManager;
use crate::pheap::Arena;
use crate::service::{ExecCtx, LockSet, Service};
use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QItem {
    /// An operations-log entry (update / no-op), identified by queue
    /// position and entry offset.
    Update { pos: u64, off: u64 },
    /// A read: volatile queue membership only, never persisted.
    Read { off: u64 },
}

impl QItem {
    pub fn off(&self) -> u64 {
        match self {
            QItem::Update { off, .. } | QItem::Read { off } => *off,
        }
    }
}

/// What the scheduler decided for a dequeued head.
#[derive(Debug, Clone, Copy)]
pub enum Dispatch {
    /// Hand to an executor.
    Run(QItem),
    /// Head was FAILED_REPLICATION: route an error response and mark for gc.
    Failed(QItem),
    /// Head already COMPLETED (restart path): re-send a generic applied
    /// acknowledgment, mark for gc.
    AlreadyDone(QItem),
}

#[derive(Debug, Default, Clone)]
pub struct SchedMetrics {
    pub ticks: u64,
    pub dispatched: u64,
    pub e_size_sum: u64,
    pub e_high_water: u64,
    /// Ticks where a present head could not be dispatched.
    pub hol_blocked_ticks: u64,
}

/// Shared executor counters for exactly-once accounting.
#[derive(Debug, Default)]
pub struct ExecCounters {
    pub handler_invocations: AtomicU64,
    pub committed_runs: AtomicU64,
}

pub struct Scheduler {
    q: VecDeque<QItem>,
    e: Vec<QItem>,
    e_cap: usize,
    pub metrics: SchedMetrics,
}

impl Scheduler {
    pub fn new(executors: usize) -> Scheduler {
        Scheduler {
            q: VecDeque::new(),
            e: Vec::new(),
            // Alg. 1 leaves E unbounded; cap it at twice the pool so a stall
            // cannot queue unbounded ready work
            e_cap: executors.max(1) * 2,
            metrics: SchedMetrics::default(),
        }
    }

    /// Rebuild the queue from the recovered operations log: updates in
    /// position order, reads discarded (they were never persisted). Entries
    /// already COMPLETED get their gc flag set; they stay queued so the
    /// restart path can re-acknowledge them.
    pub fn recover(arena: &Arena, raft: &RaftCore, executors: usize) -> Result<Scheduler> {
        let mut s = Scheduler::new(executors);
        let mut flushed = false;
        for pos in raft.queue_tail()..raft.queue_head() {
            let off = raft.entry_off_at(arena, pos)?;
            let h = arena.handle_at(off)?;
            if entry::state(arena, h)? == Some(OpState::Completed) && !entry::gc_flag(arena, h)? {
                entry::set_gc_flag(arena, h)?;
                entry::flush_flags(arena, h)?;
                flushed = true;
            }
            s.q.push_back(QItem::Update { pos, off });
        }
        if flushed {
            arena.fence();
        }
        Ok(s)
    }

    pub fn queue_len(&self) -> usize {
        self.q.len()
    }

    pub fn executing(&self) -> usize {
        self.e.len()
    }

    pub fn push_update(&mut self, pos: u64, off: u64) {
        self.q.push_back(QItem::Update { pos, off });
    }

    /// Reads enter the queue in arrival order; their entry state jumps to
    /// REPLICATED locally (set by the runtime) and is never flushed.
    pub fn push_read(&mut self, off: u64) {
        self.q.push_back(QItem::Read { off });
    }

    /// Drop all undispatched reads (leadership lost); returns their offsets
    /// so the runtime can answer and free them.
    pub fn purge_reads(&mut self) -> Vec<u64> {
        let mut purged = Vec::new();
        self.q.retain(|item| match item {
            QItem::Read { off } => {
                purged.push(*off);
                false
            }
            QItem::Update { .. } => true,
        });
        purged
    }

    /// One scheduling pass: dispatch from the head while it is dispatchable
    /// and commutes with everything executing. `serial` disables the
    /// predicate (nothing commutes), for the ablation.
    pub fn tick(
        &mut self,
        arena: &Arena,
        service: &dyn Service,
        serial: bool,
    ) -> Result<Vec<Dispatch>> {
        self.metrics.ticks += 1;
        let mut out = Vec::new();
        loop {
            if self.e.len() >= self.e_cap {
                break;
            }
            let head = match self.q.front() {
                Some(h) => *h,
                None => break,
            };
            let h = arena.handle_at(head.off())?;
            let state = entry::state(arena, h)?;
            match state {
                Some(OpState::FailedReplication) => {
                    self.q.pop_front();
                    out.push(Dispatch::Failed(head));
                    continue;
                }
                Some(OpState::Completed) => {
                    self.q.pop_front();
                    out.push(Dispatch::AlreadyDone(head));
                    continue;
                }
                Some(OpState::Replicated)
                    if entry::kind(arena, h)? == Some(Kind::Noop) =>
                {
                    // no-ops complete at commit; nothing to execute
                    self.q.pop_front();
                    out.push(Dispatch::AlreadyDone(head));
                    continue;
                }
                Some(OpState::Replicated) => {
                    let dispatchable = if serial {
                        self.e.is_empty()
                    } else {
                        let req = entry::payload(arena, h)?;
                        let mut ok = true;
                        for other in &self.e {
                            let oh = arena.handle_at(other.off())?;
                            let oreq = entry::payload(arena, oh)?;
                            if !service.commutes(req, oreq) {
                                ok = false;
                                break;
                            }
                        }
                        ok
                    };
                    if !dispatchable {
                        self.metrics.hol_blocked_ticks += 1;
                        break;
                    }
                    self.q.pop_front();
                    self.e.push(head);
                    self.metrics.dispatched += 1;
                    out.push(Dispatch::Run(head));
                }
                // RECEIVED / REPLICATING (or torn): head-of-line wait
                _ => {
                    self.metrics.hol_blocked_ticks += 1;
                    break;
                }
            }
        }
        self.metrics.e_size_sum += self.e.len() as u64;
        self.metrics.e_high_water = self.metrics.e_high_water.max(self.e.len() as u64);
        Ok(out)
    }

    /// Remove a finished operation from the ready set.
    pub fn exec_done(&mut self, off: u64) {
        self.e.retain(|i| i.off() != off);
    }

    /// Lowest queue position not yet dequeued by the scheduler; gc must
    /// stay strictly below it.
    pub fn min_pending_pos(&self) -> u64 {
        self.q
            .iter()
            .find_map(|i| match i {
                QItem::Update { pos, .. } => Some(*pos),
                QItem::Read { .. } => None,
            })
            .unwrap_or(u64::MAX)
    }
}

#[derive(Debug)]
pub enum ExecOutcome {
    /// Handler ran and committed; response blob attached.
    Done(Vec<u8>),
    /// Entry was already COMPLETED (recovery rerun); nothing executed.
    AlreadyApplied,
    /// Handler panicked; transaction rolled back.
    Panicked,
}

/// Execute one operation (Alg. 2): skip if COMPLETED, otherwise run the
/// handler in a failure-atomic transaction that also carries the COMPLETED
/// flag write, commit, release delayed locks, set the gc flag.
pub fn execute(
    arena: &Arena,
    mgr: &TxManager,
    service: &dyn Service,
    off: u64,
    counters: &ExecCounters,
) -> Result<ExecOutcome> {
    let h = arena.handle_at(off)?;
    if entry::state(arena, h)? == Some(OpState::Completed) {
        return Ok(ExecOutcome::AlreadyApplied);
    }
    let kind = entry::kind(arena, h)?.unwrap_or(Kind::Update);
    let req = entry::payload(arena, h)?;

    let mut tx = mgr.begin(arena)?;
    let mut locks = LockSet::new();
    let mut response = Vec::new();
    counters.handler_invocations.fetch_add(1, Ordering::Relaxed);

    let run = catch_unwind(AssertUnwindSafe(|| {
        let mut ctx = ExecCtx::new(arena, mgr, &mut tx);
        service.handle(&mut ctx, req, &mut locks, &mut response)
    }));

    match run {
        Ok(Ok(())) => {
            if kind.replicated() {
                // the flag write joins the transaction: completion and
                // effects become durable in the same atomic step
                mgr.write_flag(arena, &mut tx, h, entry::OFF_STATE, OpState::Completed as u8)?;
            }
            mgr.commit(arena, &mut tx)?;
            counters.committed_runs.fetch_add(1, Ordering::Relaxed);
            locks.release_all();
            if !kind.replicated() {
                entry::set_state(arena, h, OpState::Completed)?;
            }
            // gc flag is set by the event loop after E removal, so gc can
            // never free an entry the ready set still references
            Ok(ExecOutcome::Done(response))
        }
        Ok(Err(e)) => {
            mgr.abort(arena, &mut tx)?;
            locks.release_all();
            Err(e)
        }
        Err(_) => {
            mgr.abort(arena, &mut tx)?;
            locks.release_all();
            Ok(ExecOutcome::Panicked)
        }
    }
}

/// Second-panic path: durably complete the entry with no effects so the log
/// can collect it; the client gets a FAILED status blob.
pub fn finalize_error(arena: &Arena, mgr: &TxManager, off: u64) -> Result<Vec<u8>> {
    let h = arena.handle_at(off)?;
    let mut tx = mgr.begin(arena)?;
    mgr.write_flag(arena, &mut tx, h, entry::OFF_STATE, OpState::Completed as u8)?;
    mgr.commit(arena, &mut tx)?;
    Ok(vec![crate::service::status::FAILED])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logrep::entry::write_new;
    use crate::pheap::{ArenaMode, MIN_CAPACITY};
    use crate::service::RefModel;
    use rand_chacha::ChaCha8Rng;

    /// Toy counter service: request = [slot u8, delta u8]; two requests
    /// commute iff they hit different slots. State: 8 u64 counters.
    struct Counters {
        root_slot: usize,
    }

    impl Counters {
        fn root(&self, arena: &Arena) -> crate::pheap::PHandle {
            arena.root(self.root_slot).unwrap()
        }
    }

    impl Service for Counters {
        fn name(&self) -> &'static str {
            "counters"
        }
        fn init(&self, arena: &Arena) -> Result<()> {
            let h = arena.alloc(64)?;
            arena.set_root(self.root_slot, h)
        }
        fn handle(
            &self,
            ctx: &mut ExecCtx<'_>,
            request: &[u8],
            _locks: &mut LockSet,
            response: &mut Vec<u8>,
        ) -> Result<()> {
            if request.len() != 2 {
                response.push(crate::service::status::MALFORMED);
                return Ok(());
            }
            if request[1] == 0xEE {
                panic!("injected handler failure");
            }
            let h = self.root(ctx.arena);
            let off = (request[0] % 8) as u64 * 8;
            let v = ctx.read_u64(h, off)? + request[1] as u64;
            ctx.write_u64(h, off, v)?;
            response.push(crate::service::status::OK);
            response.extend_from_slice(&v.to_le_bytes());
            Ok(())
        }
        fn commutes(&self, a: &[u8], b: &[u8]) -> bool {
            a.first().map(|x| x % 8) != b.first().map(|x| x % 8)
        }
        fn is_read(&self, _request: &[u8]) -> bool {
            false
        }
        fn sample_request(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
            use rand::Rng;
            vec![rng.random_range(0..8), rng.random_range(1..4)]
        }
        fn recover_check(&self, _arena: &Arena) -> Result<Vec<String>> {
            Ok(vec![])
        }
        fn state_digest(&self, arena: &Arena) -> Result<Vec<u8>> {
            arena.read_vec(self.root(arena), 0, 64)
        }
        fn new_model(&self) -> Box<dyn RefModel> {
            Box::new(CounterModel { v: [0; 8] })
        }
    }

    struct CounterModel {
        v: [u64; 8],
    }
    impl RefModel for CounterModel {
        fn apply(&mut self, request: &[u8]) -> Vec<u8> {
            let slot = (request[0] % 8) as usize;
            self.v[slot] += request[1] as u64;
            let mut r = vec![crate::service::status::OK];
            r.extend_from_slice(&self.v[slot].to_le_bytes());
            r
        }
        fn digest(&self) -> Vec<u8> {
            self.v.iter().flat_map(|x| x.to_le_bytes()).collect()
        }
    }

    fn setup() -> (Arena, TxManager, Counters) {
        let arena = Arena::create_in_memory(MIN_CAPACITY, ArenaMode::Strict).unwrap();
        let mgr = TxManager::create(&arena).unwrap();
        let svc = Counters { root_slot: 8 };
        svc.init(&arena).unwrap();
        (arena, mgr, svc)
    }

    fn make_entry(arena: &Arena, state: OpState, req: &[u8]) -> u64 {
        let copies = AtomicU64::new(0);
        let h = write_new(arena, Kind::Update, state, 1, 1, 1, 1, req, &copies).unwrap();
        arena.fence();
        h.offset()
    }

    #[test]
    fn vacuous_commute_dispatches_into_empty_e() {
        let (arena, _mgr, svc) = setup();
        let off = make_entry(&arena, OpState::Replicated, &[0, 1]);
        let mut s = Scheduler::new(2);
        s.push_update(0, off);
        let d = s.tick(&arena, &svc, false).unwrap();
        assert_eq!(d.len(), 1);
        assert!(matches!(d[0], Dispatch::Run(_)));
    }

    #[test]
    fn replicating_head_blocks_queue() {
        let (arena, _mgr, svc) = setup();
        let off1 = make_entry(&arena, OpState::Replicating, &[0, 1]);
        let off2 = make_entry(&arena, OpState::Replicated, &[1, 1]);
        let mut s = Scheduler::new(2);
        s.push_update(0, off1);
        s.push_update(1, off2);
        let d = s.tick(&arena, &svc, false).unwrap();
        assert!(d.is_empty(), "head-of-line wait: nothing dispatches");
        assert_eq!(s.metrics.hol_blocked_ticks, 1);
    }

    #[test]
    fn commuting_heads_run_concurrently_conflicting_block() {
        let (arena, _mgr, svc) = setup();
        let a = make_entry(&arena, OpState::Replicated, &[0, 1]);
        let b = make_entry(&arena, OpState::Replicated, &[1, 1]); // different slot: commutes
        let c = make_entry(&arena, OpState::Replicated, &[0, 2]); // same slot as a: blocks
        let mut s = Scheduler::new(2);
        s.push_update(0, a);
        s.push_update(1, b);
        s.push_update(2, c);
        let d = s.tick(&arena, &svc, false).unwrap();
        assert_eq!(d.len(), 2, "a and b dispatch concurrently");
        assert_eq!(s.executing(), 2);
        // c blocked until a completes
        assert_eq!(s.tick(&arena, &svc, false).unwrap().len(), 0);
        s.exec_done(a);
        let d = s.tick(&arena, &svc, false).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn failed_head_is_dequeued() {
        let (arena, _mgr, svc) = setup();
        let off = make_entry(&arena, OpState::FailedReplication, &[0, 1]);
        let mut s = Scheduler::new(2);
        s.push_update(0, off);
        let d = s.tick(&arena, &svc, false).unwrap();
        assert!(matches!(d[0], Dispatch::Failed(_)));
        assert_eq!(s.queue_len(), 0);
    }

    #[test]
    fn serial_mode_allows_single_executing_op() {
        let (arena, _mgr, svc) = setup();
        let a = make_entry(&arena, OpState::Replicated, &[0, 1]);
        let b = make_entry(&arena, OpState::Replicated, &[1, 1]);
        let mut s = Scheduler::new(4);
        s.push_update(0, a);
        s.push_update(1, b);
        let d = s.tick(&arena, &svc, true).unwrap();
        assert_eq!(d.len(), 1, "serial ablation: one at a time");
    }

    #[test]
    fn execute_commits_and_completes() {
        let (arena, mgr, svc) = setup();
        let off = make_entry(&arena, OpState::Replicated, &[3, 5]);
        let counters = ExecCounters::default();
        let out = execute(&arena, &mgr, &svc, off, &counters).unwrap();
        match out {
            ExecOutcome::Done(resp) => {
                assert_eq!(resp[0], crate::service::status::OK);
                assert_eq!(u64::from_le_bytes(resp[1..9].try_into().unwrap()), 5);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
        let h = arena.handle_at(off).unwrap();
        assert_eq!(entry::state(&arena, h).unwrap(), Some(OpState::Completed));
        assert!(!entry::gc_flag(&arena, h).unwrap(), "gc flag is the event loop's job");
        // second run skips the handler
        let out = execute(&arena, &mgr, &svc, off, &counters).unwrap();
        assert!(matches!(out, ExecOutcome::AlreadyApplied));
        assert_eq!(counters.handler_invocations.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn completed_flag_is_atomic_with_effects() {
        // crash between handler effects and commit: both roll back together
        let (arena, mgr, svc) = setup();
        let off = make_entry(&arena, OpState::Replicated, &[2, 7]);
        let budget = {
            let counters = ExecCounters::default();
            execute(&arena, &mgr, &svc, off, &counters).unwrap();
            arena.persist_events()
        };
        for k in 0..=budget {
            let (arena, mgr, svc) = setup();
            let off = make_entry(&arena, OpState::Replicated, &[2, 7]);
            arena.set_crash_point(k);
            let counters = ExecCounters::default();
            let _ = execute(&arena, &mgr, &svc, off, &counters);
            let img = arena.simulate_crash();
            let arena2 = Arena::open_image(img, ArenaMode::Strict).unwrap();
            crate::patomic::recover_transactions(&arena2).unwrap();
            let h = arena2.handle_at(off).unwrap();
            let completed = entry::state(&arena2, h).unwrap() == Some(OpState::Completed);
            let val = arena2.read_u64(svc.root(&arena2), 16).unwrap();
            if completed {
                assert_eq!(val, 7, "crash {k}: completed implies effects");
            } else {
                assert_eq!(val, 0, "crash {k}: not completed implies no effects");
            }
        }
    }

    #[test]
    fn panic_rolls_back_and_reports() {
        let (arena, mgr, svc) = setup();
        let off = make_entry(&arena, OpState::Replicated, &[1, 0xEE]);
        let counters = ExecCounters::default();
        let out = execute(&arena, &mgr, &svc, off, &counters).unwrap();
        assert!(matches!(out, ExecOutcome::Panicked));
        let h = arena.handle_at(off).unwrap();
        assert_ne!(entry::state(&arena, h).unwrap(), Some(OpState::Completed));
        assert_eq!(arena.read_u64(svc.root(&arena), 8).unwrap(), 0);
        // finalize after the retry also panicked
        let resp = finalize_error(&arena, &mgr, off).unwrap();
        assert_eq!(resp[0], crate::service::status::FAILED);
        assert_eq!(entry::state(&arena, h).unwrap(), Some(OpState::Completed));
    }
}
