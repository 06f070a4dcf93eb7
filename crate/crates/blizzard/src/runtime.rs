//! The replica node: replication, scheduling and execution composed over one
//! arena, plus the in-process threaded cluster driver.
//!
//! [`Replica`] is a single-threaded state machine: drivers feed it peer
//! bytes, client requests, executor completions and clock ticks, and route
//! the [`NodeOut`] values it returns. The deterministic simulator drives it
//! under virtual time; [`ThreadedCluster`] runs one event-loop thread plus an
//! executor pool per node under the wall clock, with channels as transport.

use crate::error::{Error, Result};
use crate::logrep::entry::{self, Kind, OpState};
use crate::logrep::wire::{self, Message, ReplyStatus, RequestKind};
use crate::logrep::{RaftConfig, RaftCore, RaftEvent};
use crate::patomic::{self, TxManager};
use crate::pheap::{Arena, ArenaMode, ROOT_SERVICE};
use crate::sched::{self, Dispatch, ExecCounters, ExecOutcome, QItem, Scheduler};
use crate::service::Service;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;
use std::sync::Arc;

#[derive(Clone)]
pub struct ReplicaConfig {
    pub raft: RaftConfig,
    pub executors: usize,
    pub arena_capacity: u64,
    pub arena_mode: ArenaMode,
    /// Ablation: stage an extra payload copy at log-append (the send-side
    /// copy lives in `RaftConfig::force_copy`... both are driven from here).
    pub force_copy: bool,
    /// Ablation: disable the commute predicate (serial execution).
    pub serial: bool,
    /// Echo mode: updates become no-op entries acknowledged as soon as they
    /// replicate, bypassing execution (replication microbenchmark).
    pub ack_on_commit: bool,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            raft: RaftConfig::default(),
            executors: 4,
            arena_capacity: 64 << 20,
            arena_mode: ArenaMode::Fast,
            force_copy: false,
            serial: false,
            ack_on_commit: false,
        }
    }
}

#[derive(Debug)]
pub enum NodeOut {
    /// Peer-bound wire bytes.
    Send { to: u64, bytes: Vec<u8> },
    /// Client-bound reply, routed by the driver-assigned token.
    Reply { token: u64, msg: Message },
    /// Hand an operation to an executor.
    Exec { item: QItem },
    /// Role transition, for traces and failover measurement.
    LeaderChange { term: u64, is_leader: bool },
    /// A committed entry, for traces and safety checkers.
    CommittedEntry {
        index: u64,
        term: u64,
        kind: Kind,
        client_id: u64,
        request_id: u64,
    },
}

struct Pending {
    token: u64,
    request_id: u64,
    /// Raft index for updates; 0 for reads.
    index: u64,
    is_update: bool,
}

pub struct Replica {
    pub arena: Arc<Arena>,
    pub mgr: Arc<TxManager>,
    pub raft: RaftCore,
    pub sched: Scheduler,
    service: Option<Arc<dyn Service>>,
    pub counters: Arc<ExecCounters>,
    cfg: ReplicaConfig,
    pending: HashMap<u64, Pending>,
    retried: HashSet<u64>,
    ticks: u64,
}

impl Replica {
    /// Fresh node: new arena (in memory), transaction table, operations log,
    /// service roots.
    pub fn create(cfg: ReplicaConfig, service: Arc<dyn Service>) -> Result<Replica> {
        let arena = Arc::new(Arena::create_in_memory(cfg.arena_capacity, cfg.arena_mode)?);
        Self::create_on(arena, cfg, service)
    }

    /// Fresh node over a caller-provided arena (file-backed for `serve`).
    pub fn create_on(arena: Arc<Arena>, cfg: ReplicaConfig, service: Arc<dyn Service>) -> Result<Replica> {
        let mgr = Arc::new(TxManager::create(&arena)?);
        let raft = RaftCore::create(&arena, cfg.raft.clone())?;
        let sched = Scheduler::new(cfg.executors);
        let mut r = Replica {
            arena,
            mgr,
            raft,
            sched,
            service: None,
            counters: Arc::new(ExecCounters::default()),
            cfg,
            pending: HashMap::new(),
            retried: HashSet::new(),
            ticks: 0,
        };
        r.register_service(service)?;
        Ok(r)
    }

    /// Restart path: roll back interrupted transactions, rebuild replication
    /// state and the dispatch queue from the recovered image.
    pub fn open_image(image: Vec<u8>, cfg: ReplicaConfig, service: Arc<dyn Service>) -> Result<Replica> {
        let arena = Arc::new(Arena::open_image(image, cfg.arena_mode)?);
        Self::open_on(arena, cfg, service)
    }

    pub fn open_on(arena: Arc<Arena>, cfg: ReplicaConfig, service: Arc<dyn Service>) -> Result<Replica> {
        // undo logs first, then the scheduler may look at the queue
        patomic::recover_transactions(&arena)?;
        let mgr = Arc::new(TxManager::open(&arena)?);
        let raft = RaftCore::open(&arena, cfg.raft.clone())?;
        let sched = Scheduler::recover(&arena, &raft, cfg.executors)?;
        let mut r = Replica {
            arena,
            mgr,
            raft,
            sched,
            service: None,
            counters: Arc::new(ExecCounters::default()),
            cfg,
            pending: HashMap::new(),
            retried: HashSet::new(),
            ticks: 0,
        };
        r.register_service(service)?;
        Ok(r)
    }

    /// Install the handler and commute predicate. The predicate is sampled
    /// for symmetry and rejected if any pair disagrees; a second
    /// registration is an error.
    pub fn register_service(&mut self, service: Arc<dyn Service>) -> Result<()> {
        if self.service.is_some() {
            return Err(Error::DuplicateRegistration);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.raft.seed ^ 0x5e51_71ce);
        for _ in 0..64 {
            let a = service.sample_request(&mut rng);
            let b = service.sample_request(&mut rng);
            if service.commutes(&a, &b) != service.commutes(&b, &a) {
                return Err(Error::AsymmetricPredicate);
            }
        }
        if self.arena.root(ROOT_SERVICE)?.is_null() {
            service.init(&self.arena)?;
        }
        self.service = Some(service);
        Ok(())
    }

    pub fn service(&self) -> Arc<dyn Service> {
        self.service.as_ref().expect("service registered").clone()
    }

    pub fn id(&self) -> u64 {
        self.raft.id()
    }

    pub fn is_leader(&self) -> bool {
        self.raft.is_leader()
    }

    pub fn next_deadline(&self) -> u64 {
        self.raft.next_deadline()
    }

    // ---- inputs ----

    pub fn start(&mut self, now: u64) -> Result<Vec<NodeOut>> {
        let evs = self.raft.start(&self.arena, now)?;
        let mut outs = Vec::new();
        self.absorb_raft_events(evs, &mut outs)?;
        self.pump(&mut outs)?;
        Ok(outs)
    }

    pub fn on_tick(&mut self, now: u64) -> Result<Vec<NodeOut>> {
        let evs = self.raft.on_tick(&self.arena, now)?;
        let mut outs = Vec::new();
        self.absorb_raft_events(evs, &mut outs)?;
        self.pump(&mut outs)?;
        Ok(outs)
    }

    pub fn on_peer(&mut self, from: u64, bytes: &[u8], now: u64) -> Result<Vec<NodeOut>> {
        let mut outs = Vec::new();
        match wire::decode(bytes) {
            Ok(msg) => {
                let evs = self.raft.on_message(&self.arena, from, msg, now)?;
                self.absorb_raft_events(evs, &mut outs)?;
                self.pump(&mut outs)?;
            }
            Err(_) => {} // drop malformed traffic
        }
        Ok(outs)
    }

    /// A client request. `token` is a driver-owned routing handle echoed in
    /// the reply.
    pub fn on_client(
        &mut self,
        token: u64,
        kind: RequestKind,
        client_id: u64,
        request_id: u64,
        payload: &[u8],
        _now: u64,
    ) -> Result<Vec<NodeOut>> {
        let mut outs = Vec::new();
        match kind {
            RequestKind::Probe => {
                let (status, hint) = if self.raft.is_leader() {
                    (ReplyStatus::Ok, self.id())
                } else {
                    (
                        ReplyStatus::NotLeader,
                        self.raft.leader_hint().unwrap_or(wire::NO_HINT),
                    )
                };
                outs.push(NodeOut::Reply {
                    token,
                    msg: Message::ClientReply {
                        status,
                        leader_hint: hint,
                        request_id,
                        payload: vec![],
                    },
                });
            }
            RequestKind::Update => {
                if !self.raft.is_leader() {
                    outs.push(self.reply_not_leader(token, request_id));
                    return Ok(outs);
                }
                let staged;
                let body = if self.cfg.force_copy {
                    // ablation: an extra staging copy before the log append
                    staged = payload.to_vec();
                    self.raft.payload_copies.fetch_add(1, Ordering::Relaxed);
                    &staged[..]
                } else {
                    payload
                };
                let kind = if body.is_empty() || self.cfg.ack_on_commit {
                    Kind::Noop
                } else {
                    Kind::Update
                };
                match self.raft.client_append(&self.arena, kind, body, client_id, request_id) {
                    Ok((pos, off, index)) => {
                        self.sched.push_update(pos, off);
                        self.pending.insert(
                            off,
                            Pending {
                                token,
                                request_id,
                                index,
                                is_update: true,
                            },
                        );
                    }
                    Err(Error::LogFull) | Err(Error::OutOfSpace { .. }) => {
                        outs.push(self.reply_status(token, request_id, ReplyStatus::Busy));
                    }
                    Err(e) => return Err(e),
                }
            }
            RequestKind::Read => {
                if !self.raft.is_leader() {
                    outs.push(self.reply_not_leader(token, request_id));
                    return Ok(outs);
                }
                if self.sched.queue_len() as u64 >= self.cfg.raft.log_capacity {
                    outs.push(self.reply_status(token, request_id, ReplyStatus::Busy));
                    return Ok(outs);
                }
                // reads enter the queue but are never replicated or
                // persisted: the state flag jumps to REPLICATED locally
                match entry::write_new(
                    &self.arena,
                    Kind::Read,
                    OpState::Replicated,
                    self.raft.current_term(),
                    0,
                    client_id,
                    request_id,
                    payload,
                    &self.raft.payload_copies,
                ) {
                    Ok(h) => {
                        self.sched.push_read(h.offset());
                        self.pending.insert(
                            h.offset(),
                            Pending {
                                token,
                                request_id,
                                index: 0,
                                is_update: false,
                            },
                        );
                    }
                    Err(Error::OutOfSpace { .. }) => {
                        outs.push(self.reply_status(token, request_id, ReplyStatus::Busy));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(outs)
    }

    /// Publish accumulated appends and run the scheduler. Drivers call this
    /// after absorbing a burst of client inputs, which is what forms batches.
    pub fn flush_now(&mut self) -> Result<Vec<NodeOut>> {
        let mut outs = Vec::new();
        self.pump(&mut outs)?;
        Ok(outs)
    }

    pub fn on_exec_done(&mut self, item: QItem, outcome: ExecOutcome, _now: u64) -> Result<Vec<NodeOut>> {
        let mut outs = Vec::new();
        let off = item.off();
        match outcome {
            ExecOutcome::Done(response) => {
                self.finish(item, Some(response), &mut outs)?;
            }
            ExecOutcome::AlreadyApplied => {
                self.finish(item, None, &mut outs)?;
            }
            ExecOutcome::Panicked => {
                if self.retried.insert(off) {
                    // single retry; the entry never left E so pairwise
                    // commutativity still holds
                    outs.push(NodeOut::Exec { item });
                } else {
                    let response = sched::finalize_error(&self.arena, &self.mgr, off)?;
                    self.retried.remove(&off);
                    self.sched.exec_done(off);
                    self.set_gc(off)?;
                    if let Some(p) = self.pending.remove(&off) {
                        outs.push(NodeOut::Reply {
                            token: p.token,
                            msg: Message::ClientReply {
                                status: ReplyStatus::AppError,
                                leader_hint: self.id(),
                                request_id: p.request_id,
                                payload: response,
                            },
                        });
                    }
                    if matches!(item, QItem::Read { .. }) {
                        self.free_read(off)?;
                    }
                }
            }
        }
        self.pump(&mut outs)?;
        Ok(outs)
    }

    fn finish(&mut self, item: QItem, response: Option<Vec<u8>>, outs: &mut Vec<NodeOut>) -> Result<()> {
        let off = item.off();
        self.retried.remove(&off);
        self.sched.exec_done(off);
        let is_read = matches!(item, QItem::Read { .. });
        if !is_read {
            self.set_gc(off)?;
        }
        if let Some(p) = self.pending.remove(&off) {
            let payload = response.unwrap_or_else(|| vec![crate::service::status::APPLIED]);
            outs.push(NodeOut::Reply {
                token: p.token,
                msg: Message::ClientReply {
                    status: ReplyStatus::Ok,
                    leader_hint: self.id(),
                    request_id: p.request_id,
                    payload,
                },
            });
        }
        if is_read {
            self.free_read(off)?;
        }
        Ok(())
    }

    // ---- internals ----

    fn reply_not_leader(&self, token: u64, request_id: u64) -> NodeOut {
        NodeOut::Reply {
            token,
            msg: Message::ClientReply {
                status: ReplyStatus::NotLeader,
                leader_hint: self.raft.leader_hint().unwrap_or(wire::NO_HINT),
                request_id,
                payload: vec![],
            },
        }
    }

    fn reply_status(&self, token: u64, request_id: u64, status: ReplyStatus) -> NodeOut {
        NodeOut::Reply {
            token,
            msg: Message::ClientReply {
                status,
                leader_hint: self.raft.leader_hint().unwrap_or(wire::NO_HINT),
                request_id,
                payload: vec![],
            },
        }
    }

    fn set_gc(&self, off: u64) -> Result<()> {
        let h = self.arena.handle_at(off)?;
        entry::set_gc_flag(&self.arena, h)
    }

    fn free_read(&self, off: u64) -> Result<()> {
        self.arena.free(self.arena.handle_at(off)?)
    }

    fn absorb_raft_events(&mut self, evs: Vec<RaftEvent>, outs: &mut Vec<NodeOut>) -> Result<()> {
        let mut flag_fence = false;
        for ev in evs {
            match ev {
                RaftEvent::Send { to, bytes } => outs.push(NodeOut::Send { to, bytes }),
                RaftEvent::Appended { pos, off, kind: _ } => {
                    self.sched.push_update(pos, off);
                }
                RaftEvent::Committed { index, pos: _, off, kind } => {
                    let h = self.arena.handle_at(off)?;
                    outs.push(NodeOut::CommittedEntry {
                        index,
                        term: entry::term(&self.arena, h)?,
                        kind,
                        client_id: entry::client_id(&self.arena, h)?,
                        request_id: entry::request_id(&self.arena, h)?,
                    });
                    if kind == Kind::Noop {
                        // echo semantics: acknowledged as soon as the entry
                        // is replicated; nothing executes
                        if entry::state(&self.arena, h)? != Some(OpState::Completed) {
                            entry::set_state(&self.arena, h, OpState::Completed)?;
                            entry::flush_flags(&self.arena, h)?;
                            flag_fence = true;
                        }
                        if let Some(p) = self.pending.remove(&off) {
                            outs.push(NodeOut::Reply {
                                token: p.token,
                                msg: Message::ClientReply {
                                    status: ReplyStatus::Ok,
                                    leader_hint: self.id(),
                                    request_id: p.request_id,
                                    payload: vec![crate::service::status::OK],
                                },
                            });
                        }
                    }
                }
                RaftEvent::Failed { pos: _, off } => {
                    if let Some(p) = self.pending.remove(&off) {
                        outs.push(self.reply_status(p.token, p.request_id, ReplyStatus::Retryable));
                    }
                }
                RaftEvent::BecameLeader { term } => {
                    outs.push(NodeOut::LeaderChange {
                        term,
                        is_leader: true,
                    });
                }
                RaftEvent::SteppedDown { term } => {
                    outs.push(NodeOut::LeaderChange {
                        term,
                        is_leader: false,
                    });
                    self.fail_pending_on_stepdown(outs)?;
                }
            }
        }
        if flag_fence {
            self.arena.fence();
        }
        Ok(())
    }

    /// Deposed leader: uncommitted updates get a retryable error now (their
    /// fate belongs to the new leader); queued reads are purged and freed.
    fn fail_pending_on_stepdown(&mut self, outs: &mut Vec<NodeOut>) -> Result<()> {
        let commit = self.raft.commit_index();
        let mut doomed: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.is_update && p.index > commit)
            .map(|(off, _)| *off)
            .collect();
        doomed.sort_unstable(); // deterministic reply order under simulation
        for off in doomed {
            let p = self.pending.remove(&off).expect("present");
            outs.push(self.reply_status(p.token, p.request_id, ReplyStatus::Retryable));
        }
        for off in self.sched.purge_reads() {
            if let Some(p) = self.pending.remove(&off) {
                outs.push(self.reply_status(p.token, p.request_id, ReplyStatus::Retryable));
            }
            self.free_read(off)?;
        }
        Ok(())
    }

    /// Publish pending appends (one fence per batch), run the scheduler,
    /// and collect garbage periodically.
    fn pump(&mut self, outs: &mut Vec<NodeOut>) -> Result<()> {
        let evs = self.raft.publish_appends(&self.arena)?;
        self.absorb_raft_events(evs, outs)?;

        let service = self.service.as_ref().expect("service registered").clone();
        let dispatches = self.sched.tick(&self.arena, &*service, self.cfg.serial)?;
        let mut flag_fence = false;
        for d in dispatches {
            match d {
                Dispatch::Run(item) => outs.push(NodeOut::Exec { item }),
                Dispatch::Failed(item) => {
                    let off = item.off();
                    self.set_gc(off)?;
                    let h = self.arena.handle_at(off)?;
                    entry::flush_flags(&self.arena, h)?;
                    flag_fence = true;
                    if let Some(p) = self.pending.remove(&off) {
                        outs.push(self.reply_status(p.token, p.request_id, ReplyStatus::Retryable));
                    }
                }
                Dispatch::AlreadyDone(item) => {
                    let off = item.off();
                    self.set_gc(off)?;
                    if let Some(p) = self.pending.remove(&off) {
                        // completed before a crash: the original response
                        // payload was not persisted, acknowledge generically
                        outs.push(NodeOut::Reply {
                            token: p.token,
                            msg: Message::ClientReply {
                                status: ReplyStatus::Ok,
                                leader_hint: self.id(),
                                request_id: p.request_id,
                                payload: vec![crate::service::status::APPLIED],
                            },
                        });
                    }
                }
            }
        }
        if flag_fence {
            self.arena.fence();
        }

        self.ticks += 1;
        if self.ticks % 32 == 0 {
            self.raft.gc_advance(&self.arena, self.sched.min_pending_pos())?;
        }
        Ok(())
    }

    /// Run one operation on the caller's thread (simulator executors are
    /// virtual).
    pub fn run_exec(&self, item: QItem) -> Result<ExecOutcome> {
        sched::execute(
            &self.arena,
            &self.mgr,
            &*self.service(),
            item.off(),
            &self.counters,
        )
    }

    fn report(&self) -> Result<NodeReport> {
        Ok(NodeReport {
            id: self.id(),
            fences: self.arena.fence_count(),
            flushes: self.arena.flush_count(),
            payload_copies: self.raft.payload_copies.load(Ordering::Relaxed),
            batches_sent: self.raft.metrics.batches_sent,
            nonempty_batches: self.raft.metrics.nonempty_batches,
            batch_entries: self.raft.metrics.batch_entries_sum,
            sched: self.sched.metrics.clone(),
            handler_invocations: self.counters.handler_invocations.load(Ordering::Relaxed),
            committed_runs: self.counters.committed_runs.load(Ordering::Relaxed),
            digest: self.state_digest()?,
            commit_index: self.raft.commit_index(),
            is_leader: self.is_leader(),
            queue_len: self.raft.queue_len(),
        })
    }

    pub fn state_digest(&self) -> Result<Vec<u8>> {
        self.service().state_digest(&self.arena)
    }

    /// (index, term, client_id, request_id) of live log entries, for
    /// log-matching checks.
    pub fn log_identity(&self) -> Result<Vec<(u64, u64, u64, u64)>> {
        self.raft.log_identity(&self.arena)
    }

    pub fn recover_check(&self) -> Result<Vec<String>> {
        self.service().recover_check(&self.arena)
    }
}

// ---- threaded in-process cluster ----

use crate::net::client::{ClientPolicy, Status, Verdict};
use crate::sched::SchedMetrics;
use std::sync::atomic::AtomicU64;
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct NodeReport {
    pub id: u64,
    pub fences: u64,
    pub flushes: u64,
    pub payload_copies: u64,
    pub batches_sent: u64,
    pub nonempty_batches: u64,
    pub batch_entries: u64,
    pub sched: SchedMetrics,
    pub handler_invocations: u64,
    pub committed_runs: u64,
    pub digest: Vec<u8>,
    pub commit_index: u64,
    pub is_leader: bool,
    pub queue_len: u64,
}

pub enum Input {
    Peer { from: u64, bytes: Vec<u8> },
    Client {
        token: u64,
        kind: RequestKind,
        client_id: u64,
        request_id: u64,
        payload: Vec<u8>,
        reply: mpsc::Sender<Message>,
    },
    ExecDone { item: QItem, outcome: ExecOutcome },
    Shutdown,
}

/// One event-loop thread plus an executor pool per node; channels carry the
/// wire bytes. Used by throughput benchmarks and the ablation suites.
pub struct ThreadedCluster {
    inputs: Vec<mpsc::Sender<Input>>,
    handles: Vec<JoinHandle<Result<NodeReport>>>,
    tokens: Arc<AtomicU64>,
    n: u64,
}

impl ThreadedCluster {
    pub fn start(
        n: u64,
        base: ReplicaConfig,
        factory: Arc<dyn Fn() -> Arc<dyn Service> + Send + Sync>,
    ) -> Result<ThreadedCluster> {
        let mut txs = Vec::new();
        let mut rxs = Vec::new();
        for _ in 0..n {
            let (tx, rx) = mpsc::channel::<Input>();
            txs.push(tx);
            rxs.push(Some(rx));
        }
        let mut handles = Vec::new();
        for id in 0..n {
            let mut cfg = base.clone();
            cfg.raft.id = id;
            cfg.raft.peers = (0..n).filter(|p| *p != id).collect();
            let replica = Replica::create(cfg.clone(), (factory)())?;
            let rx = rxs[id as usize].take().expect("receiver");
            let peer_txs = txs.clone();
            let self_tx = txs[id as usize].clone();
            handles.push(std::thread::spawn(move || {
                node_loop(replica, cfg, rx, peer_txs, self_tx)
            }));
        }
        Ok(ThreadedCluster {
            inputs: txs,
            handles,
            tokens: Arc::new(AtomicU64::new(1)),
            n,
        })
    }

    pub fn client(&self, client_id: u64, timeout: Duration, attempts: u32) -> ClusterClient {
        ClusterClient {
            inputs: self.inputs.clone(),
            policy: ClientPolicy::new((0..self.n).collect(), attempts),
            attempts,
            client_id,
            next_rid: 0,
            tokens: self.tokens.clone(),
            timeout,
        }
    }

    pub fn shutdown(self) -> Result<Vec<NodeReport>> {
        for tx in &self.inputs {
            let _ = tx.send(Input::Shutdown);
        }
        let mut reports = Vec::new();
        for h in self.handles {
            reports.push(h.join().expect("node thread panicked")?);
        }
        Ok(reports)
    }
}

fn node_loop(
    replica: Replica,
    cfg: ReplicaConfig,
    rx: mpsc::Receiver<Input>,
    peer_txs: Vec<mpsc::Sender<Input>>,
    self_tx: mpsc::Sender<Input>,
) -> Result<NodeReport> {
    let id = replica.id();
    let r = node_loop_inner(replica, cfg, rx, peer_txs, self_tx);
    if let Err(e) = &r {
        eprintln!("node {id} event loop failed: {e}");
    }
    r
}

fn node_loop_inner(
    mut replica: Replica,
    cfg: ReplicaConfig,
    rx: mpsc::Receiver<Input>,
    peer_txs: Vec<mpsc::Sender<Input>>,
    self_tx: mpsc::Sender<Input>,
) -> Result<NodeReport> {
    // executor pool
    let mut exec_txs = Vec::new();
    let mut exec_handles = Vec::new();
    for _ in 0..cfg.executors.max(1) {
        let (jtx, jrx) = mpsc::channel::<QItem>();
        let arena = replica.arena.clone();
        let mgr = replica.mgr.clone();
        let service = replica.service();
        let counters = replica.counters.clone();
        let done_tx = self_tx.clone();
        exec_handles.push(std::thread::spawn(move || {
            while let Ok(item) = jrx.recv() {
                match sched::execute(&arena, &mgr, &*service, item.off(), &counters) {
                    Ok(outcome) => {
                        if done_tx.send(Input::ExecDone { item, outcome }).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        }));
        exec_txs.push(jtx);
    }

    let started = Instant::now();
    let now_us = |started: &Instant| started.elapsed().as_micros() as u64;
    let my_id = replica.id();
    let mut replies: HashMap<u64, mpsc::Sender<Message>> = HashMap::new();
    let mut rr = 0usize;
    let mut closing_since: Option<Instant> = None;

    let outs = replica.start(now_us(&started))?;
    route_outs(outs, my_id, &peer_txs, &mut replies, &exec_txs, &mut rr);

    loop {
        let now = now_us(&started);
        let wait = replica.next_deadline().saturating_sub(now).clamp(200, 2_000);
        let first = rx.recv_timeout(Duration::from_micros(wait));
        let mut inputs = Vec::new();
        match first {
            Ok(i) => {
                inputs.push(i);
                while inputs.len() < 512 {
                    match rx.try_recv() {
                        Ok(i) => inputs.push(i),
                        Err(_) => break,
                    }
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
        if let Some(since) = closing_since {
            // keep replicating and executing through a grace window so
            // followers receive the final commits before anyone reports,
            // then require a local drain (bounded by a hard deadline)
            let drained = replica.sched.queue_len() == 0 && replica.sched.executing() == 0;
            let elapsed = since.elapsed();
            if (drained && elapsed > Duration::from_millis(300))
                || elapsed > Duration::from_millis(1500)
            {
                break;
            }
        }
        let now = now_us(&started);
        let mut outs = Vec::new();
        for input in inputs {
            match input {
                Input::Peer { from, bytes } => {
                    outs.extend(replica.on_peer(from, &bytes, now)?);
                }
                Input::Client {
                    token,
                    kind,
                    client_id,
                    request_id,
                    payload,
                    reply,
                } => {
                    replies.insert(token, reply);
                    outs.extend(replica.on_client(token, kind, client_id, request_id, &payload, now)?);
                }
                Input::ExecDone { item, outcome } => {
                    outs.extend(replica.on_exec_done(item, outcome, now)?);
                }
                Input::Shutdown => closing_since = Some(Instant::now()),
            }
        }
        outs.extend(replica.flush_now()?);
        outs.extend(replica.on_tick(now)?);
        route_outs(outs, my_id, &peer_txs, &mut replies, &exec_txs, &mut rr);
    }

    drop(exec_txs);
    for h in exec_handles {
        let _ = h.join();
    }
    replica.report()
}

fn route_outs(
    outs: Vec<NodeOut>,
    my_id: u64,
    peer_txs: &[mpsc::Sender<Input>],
    replies: &mut HashMap<u64, mpsc::Sender<Message>>,
    exec_txs: &[mpsc::Sender<QItem>],
    rr: &mut usize,
) {
    for out in outs {
        match out {
            NodeOut::Send { to, bytes } => {
                if let Some(tx) = peer_txs.get(to as usize) {
                    let _ = tx.send(Input::Peer { from: my_id, bytes });
                }
            }
            NodeOut::Reply { token, msg } => {
                if let Some(tx) = replies.remove(&token) {
                    let _ = tx.send(msg);
                }
            }
            NodeOut::Exec { item } => {
                let tx = &exec_txs[*rr % exec_txs.len()];
                *rr += 1;
                let _ = tx.send(item);
            }
            NodeOut::LeaderChange { .. } | NodeOut::CommittedEntry { .. } => {}
        }
    }
}

/// Blocking client for threaded clusters: leader discovery, hint-following
/// and probing on timeout, shared policy with the simulator sessions.
pub struct ClusterClient {
    inputs: Vec<mpsc::Sender<Input>>,
    policy: ClientPolicy,
    attempts: u32,
    client_id: u64,
    next_rid: u64,
    tokens: Arc<AtomicU64>,
    timeout: Duration,
}

impl ClusterClient {
    pub fn update(&mut self, payload: &[u8]) -> (Status, Vec<u8>) {
        self.call(RequestKind::Update, payload)
    }

    pub fn read(&mut self, payload: &[u8]) -> (Status, Vec<u8>) {
        self.call(RequestKind::Read, payload)
    }

    /// Issue operations with up to `window` requests outstanding against the
    /// cached leader. Returns the count of OK results; per-op latencies are
    /// appended to `lat_out`. Failed sends fall back to one blocking call
    /// (re-discovering the leader), then pipelining resumes.
    pub fn pipelined(&mut self, ops: &[(Vec<u8>, bool)], window: usize, lat_out: &mut Vec<u64>) -> u64 {
        let mut ok = 0u64;
        let mut i = 0usize;
        while i < ops.len() {
            // ensure a leader is cached by running one op the blocking way
            let (req, is_read) = &ops[i];
            let (st, _) = if *is_read { self.read(req) } else { self.update(req) };
            lat_out.push(0);
            if st == Status::Ok {
                ok += 1;
            }
            i += 1;
            let Some(leader) = self.policy.cached_leader() else {
                continue;
            };
            // stream a window at the leader until something goes wrong
            let mut inflight: HashMap<u64, (usize, Instant)> = HashMap::new();
            let (tx, rx) = mpsc::channel();
            let mut trouble = false;
            while !trouble && (i < ops.len() || !inflight.is_empty()) {
                while i < ops.len() && inflight.len() < window {
                    let token = self.tokens.fetch_add(1, Ordering::Relaxed);
                    self.next_rid += 1;
                    let (req, is_read) = &ops[i];
                    let kind = if *is_read { RequestKind::Read } else { RequestKind::Update };
                    let sent = self.inputs[leader as usize]
                        .send(Input::Client {
                            token,
                            kind,
                            client_id: self.client_id,
                            request_id: self.next_rid,
                            payload: req.clone(),
                            reply: tx.clone(),
                        })
                        .is_ok();
                    if !sent {
                        trouble = true;
                        break;
                    }
                    inflight.insert(self.next_rid, (i, Instant::now()));
                    i += 1;
                }
                match rx.recv_timeout(self.timeout) {
                    Ok(Message::ClientReply { status, request_id, .. }) => {
                        if let Some((_, t0)) = inflight.remove(&request_id) {
                            lat_out.push(t0.elapsed().as_micros() as u64);
                            match status {
                                ReplyStatus::Ok => ok += 1,
                                _ => trouble = true,
                            }
                        }
                    }
                    Ok(_) => {}
                    Err(_) => trouble = true,
                }
            }
            if trouble {
                self.policy.on_timeout(leader);
                // unfinished window ops are retried through the blocking path
                let mut remaining: Vec<usize> = inflight.values().map(|(idx, _)| *idx).collect();
                remaining.sort_unstable();
                for idx in remaining {
                    let (req, is_read) = &ops[idx];
                    let (st, _) = if *is_read { self.read(req) } else { self.update(req) };
                    lat_out.push(0);
                    if st == Status::Ok {
                        ok += 1;
                    }
                }
            }
        }
        ok
    }

    fn call(&mut self, kind: RequestKind, payload: &[u8]) -> (Status, Vec<u8>) {
        self.next_rid += 1;
        let rid = self.next_rid;
        self.policy.reset_attempts(self.attempts);
        loop {
            let Some(target) = self.policy.next_target() else {
                return (Status::NoLeader, vec![]);
            };
            let token = self.tokens.fetch_add(1, Ordering::Relaxed);
            let (tx, rx) = mpsc::channel();
            let sent = self.inputs[target as usize]
                .send(Input::Client {
                    token,
                    kind,
                    client_id: self.client_id,
                    request_id: rid,
                    payload: payload.to_vec(),
                    reply: tx,
                })
                .is_ok();
            if !sent {
                self.policy.on_timeout(target);
                continue;
            }
            match rx.recv_timeout(self.timeout) {
                Ok(Message::ClientReply {
                    status,
                    leader_hint,
                    payload: body,
                    ..
                }) => {
                    if std::env::var("BLZ_CLIENT_DEBUG").is_ok() {
                        eprintln!("client {} got {:?} hint {} from {}", self.client_id, status, leader_hint, target);
                    }
                    match self.policy.on_reply(target, status, leader_hint) {
                    Verdict::Done(s) => return (s, body),
                    Verdict::Retry => {
                        // back off while the cluster elects or drains
                        let pause = match status {
                            ReplyStatus::Busy => Duration::from_micros(200),
                            ReplyStatus::NotLeader if leader_hint == wire::NO_HINT => {
                                Duration::from_millis(3)
                            }
                            _ => Duration::from_micros(500),
                        };
                        std::thread::sleep(pause);
                        continue;
                    }
                }},
                Ok(_) => continue,
                Err(_) => {
                    self.policy.on_timeout(target);
                    continue;
                }
            }
        }
    }
}
