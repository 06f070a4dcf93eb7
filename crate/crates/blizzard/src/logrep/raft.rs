//! RAFT replication over the coupled operations log.
//!
//! One `RaftCore` per node, owned by that node's event loop. All methods are
//! synchronous state transitions that return the I/O they want performed
//! ([`RaftEvent`]); drivers (deterministic simulator, threaded cluster, UDP
//! node) route those events. Time is an abstract microsecond counter so the
//! same logic runs under virtual and wall clocks.
//!
//! Entries live in the arena once and are referenced by offset from the
//! operations log; batch sends serialize straight from those buffers. A
//! superseded suffix is not cut out of the queue: conflicting entries are
//! flagged FAILED_REPLICATION in place, dropped from the index map, and left
//! for the scheduler to dequeue and route an error response.

use super::entry::{self, Kind, OpState};
use super::oplog::OpLog;
use super::wire::{self, BatchEncoder, Message};
use crate::error::{Error, Result};
use crate::pheap::Arena;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::AtomicU64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone)]
pub struct RaftConfig {
    pub id: u64,
    pub peers: Vec<u64>,
    /// Election timeout T; actual timeouts are randomized in [T, 2T].
    pub election_timeout_us: u64,
    pub heartbeat_us: u64,
    pub batch_cap: usize,
    pub log_capacity: u64,
    pub seed: u64,
    /// Ablation: copy payloads into a staging buffer per peer send instead
    /// of serializing them in place.
    pub force_copy: bool,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig {
            id: 0,
            peers: vec![],
            election_timeout_us: 100_000,
            heartbeat_us: 30_000,
            batch_cap: 32,
            log_capacity: 1 << 16,
            seed: 0,
            force_copy: false,
        }
    }
}

#[derive(Debug)]
pub enum RaftEvent {
    Send { to: u64, bytes: Vec<u8> },
    /// A new entry entered the operations log on this node (follower appends
    /// and the leader's own no-op entries; client appends return directly).
    Appended { pos: u64, off: u64, kind: Kind },
    /// Entry newly committed, emitted in index order.
    Committed { index: u64, pos: u64, off: u64, kind: Kind },
    /// Entry superseded by a conflicting suffix; flagged FAILED_REPLICATION.
    Failed { pos: u64, off: u64 },
    BecameLeader { term: u64 },
    SteppedDown { term: u64 },
}

#[derive(Debug, Default, Clone)]
pub struct RaftMetrics {
    pub batches_sent: u64,
    pub nonempty_batches: u64,
    pub batch_entries_sum: u64,
    pub acks_handled: u64,
    pub elections_started: u64,
}

pub struct RaftCore {
    cfg: RaftConfig,
    role: Role,
    leader_hint: Option<u64>,
    current_term: u64,
    voted_for: Option<u64>,
    commit_index: u64,
    last_index: u64,
    last_term: u64,
    gc_index: u64,
    gc_term: u64,
    oplog: OpLog,
    /// raft index -> oplog position, live entries only
    index_map: BTreeMap<u64, u64>,
    pending_publish: Vec<u64>,
    next_index: HashMap<u64, u64>,
    match_index: HashMap<u64, u64>,
    /// Highest index already streamed to each peer; publishes send only
    /// newer entries, heartbeats and nacks retransmit from next_index.
    sent_up_to: HashMap<u64, u64>,
    /// Collection watermark learned from the leader: every peer durably
    /// holds entries up to here. Followers never collect beyond it.
    gc_safe: u64,
    votes: usize,
    election_deadline: u64,
    heartbeat_deadline: u64,
    rng: ChaCha8Rng,
    /// Zero-copy instrumentation: payload memcpys into this node's arena.
    pub payload_copies: AtomicU64,
    pub metrics: RaftMetrics,
}

impl RaftCore {
    /// Initialize replication state in a fresh arena.
    pub fn create(arena: &Arena, cfg: RaftConfig) -> Result<RaftCore> {
        let oplog = OpLog::create(arena, cfg.log_capacity)?;
        Ok(Self::with_oplog(cfg, oplog, 0, None, 0, 0, 0, 0, BTreeMap::new()))
    }

    /// Rebuild replication state from a recovered arena: reload the meta
    /// block and rescan the queue to rebuild the index map. An entry whose
    /// index was superseded by a later append (its truncation-time FAILED
    /// flag missed durability) is re-flagged here.
    pub fn open(arena: &Arena, cfg: RaftConfig) -> Result<RaftCore> {
        let oplog = OpLog::open(arena)?;
        if oplog.capacity() != cfg.log_capacity {
            return Err(Error::ConfigInvalid(format!(
                "log capacity {} does not match configured {}",
                oplog.capacity(),
                cfg.log_capacity
            )));
        }
        let current_term = oplog.current_term(arena)?;
        let voted_for = oplog.voted_for(arena)?;
        let (gc_index, gc_term) = oplog.gc_watermark(arena)?;

        let mut index_map: BTreeMap<u64, u64> = BTreeMap::new();
        let mut flushed_any = false;
        for pos in oplog.tail()..oplog.head() {
            let off = oplog.entry_off_at(arena, pos)?;
            let h = arena
                .handle_at(off)
                .map_err(|_| Error::CorruptQueue(format!("bad offset {off} at {pos}")))?;
            let kind = entry::kind(arena, h)?
                .ok_or_else(|| Error::CorruptQueue(format!("entry at {pos} has no kind")))?;
            if kind == Kind::Read {
                return Err(Error::CorruptQueue(format!("read entry persisted at {pos}")));
            }
            let state = entry::state(arena, h)?
                .ok_or_else(|| Error::CorruptQueue(format!("entry at {pos} has no state")))?;
            if state == OpState::FailedReplication {
                continue;
            }
            let index = entry::index(arena, h)?;
            if let Some(prev_pos) = index_map.insert(index, pos) {
                let prev_off = oplog.entry_off_at(arena, prev_pos)?;
                let prev_h = arena.handle_at(prev_off)?;
                entry::set_state(arena, prev_h, OpState::FailedReplication)?;
                entry::flush_flags(arena, prev_h)?;
                flushed_any = true;
            }
        }
        if flushed_any {
            arena.fence();
        }

        let (last_index, last_term) = match index_map.iter().next_back() {
            Some((idx, pos)) => {
                let off = oplog.entry_off_at(arena, *pos)?;
                (*idx, entry::term(arena, arena.handle_at(off)?)?)
            }
            None => (gc_index, gc_term),
        };

        let mut core = Self::with_oplog(
            cfg,
            oplog,
            current_term,
            voted_for,
            gc_index,
            gc_term,
            last_index,
            last_term,
            index_map,
        );
        // everything at or before the gc watermark was committed and executed
        core.commit_index = gc_index;
        Ok(core)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_oplog(
        cfg: RaftConfig,
        oplog: OpLog,
        current_term: u64,
        voted_for: Option<u64>,
        gc_index: u64,
        gc_term: u64,
        last_index: u64,
        last_term: u64,
        index_map: BTreeMap<u64, u64>,
    ) -> RaftCore {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (cfg.id << 32));
        RaftCore {
            cfg,
            role: Role::Follower,
            leader_hint: None,
            current_term,
            voted_for,
            commit_index: 0,
            last_index,
            last_term,
            gc_index,
            gc_term,
            oplog,
            index_map,
            pending_publish: Vec::new(),
            next_index: HashMap::new(),
            match_index: HashMap::new(),
            sent_up_to: HashMap::new(),
            gc_safe: 0,
            votes: 0,
            election_deadline: 0,
            heartbeat_deadline: 0,
            rng,
            payload_copies: AtomicU64::new(0),
            metrics: RaftMetrics::default(),
        }
    }

    // ---- accessors ----

    pub fn id(&self) -> u64 {
        self.cfg.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn current_term(&self) -> u64 {
        self.current_term
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn last_index(&self) -> u64 {
        self.last_index
    }

    pub fn leader_hint(&self) -> Option<u64> {
        self.leader_hint
    }

    pub fn queue_tail(&self) -> u64 {
        self.oplog.tail()
    }

    pub fn queue_head(&self) -> u64 {
        self.oplog.head()
    }

    pub fn queue_len(&self) -> u64 {
        self.oplog.len()
    }

    pub fn batch_cap(&self) -> usize {
        self.cfg.batch_cap
    }

    pub fn entry_off_at(&self, arena: &Arena, pos: u64) -> Result<u64> {
        self.oplog.entry_off_at(arena, pos)
    }

    /// Live log as (index, term) pairs — for safety checkers.
    pub fn log_pairs(&self, arena: &Arena) -> Result<Vec<(u64, u64)>> {
        let mut out = Vec::with_capacity(self.index_map.len());
        for (idx, pos) in &self.index_map {
            let off = self.oplog.entry_off_at(arena, *pos)?;
            out.push((*idx, entry::term(arena, arena.handle_at(off)?)?));
        }
        Ok(out)
    }

    pub fn gc_index(&self) -> u64 {
        self.gc_index
    }

    /// (index, term, client_id, request_id) of live log entries.
    pub fn log_identity(&self, arena: &Arena) -> Result<Vec<(u64, u64, u64, u64)>> {
        let mut out = Vec::with_capacity(self.index_map.len());
        for (idx, pos) in &self.index_map {
            let off = self.oplog.entry_off_at(arena, *pos)?;
            let h = arena.handle_at(off)?;
            out.push((
                *idx,
                entry::term(arena, h)?,
                entry::client_id(arena, h)?,
                entry::request_id(arena, h)?,
            ));
        }
        Ok(out)
    }

    /// (index, client_id, request_id) of committed update entries still in
    /// the queue, plus the gc watermark — for acked-write-loss checks.
    pub fn committed_updates(&self, arena: &Arena) -> Result<(u64, Vec<(u64, u64, u64)>)> {
        let mut out = Vec::new();
        for (idx, pos) in self.index_map.range(..=self.commit_index) {
            let off = self.oplog.entry_off_at(arena, *pos)?;
            let h = arena.handle_at(off)?;
            if entry::kind(arena, h)? == Some(Kind::Update) {
                out.push((
                    *idx,
                    entry::client_id(arena, h)?,
                    entry::request_id(arena, h)?,
                ));
            }
        }
        Ok((self.gc_index, out))
    }

    fn cluster_size(&self) -> usize {
        self.cfg.peers.len() + 1
    }

    fn quorum(&self) -> usize {
        self.cluster_size() / 2 + 1
    }

    /// Entries every peer has durably acknowledged (the leader itself
    /// always holds its log, so this is the min over peers).
    fn all_peers_hold(&self) -> u64 {
        self.cfg
            .peers
            .iter()
            .map(|p| *self.match_index.get(p).unwrap_or(&0))
            .min()
            .unwrap_or(self.commit_index)
            .min(self.commit_index)
    }

    fn term_at(&self, arena: &Arena, index: u64) -> Result<Option<u64>> {
        if index == 0 {
            return Ok(Some(0));
        }
        if index == self.gc_index {
            return Ok(Some(self.gc_term));
        }
        if index < self.gc_index {
            return Ok(None);
        }
        match self.index_map.get(&index) {
            Some(pos) => {
                let off = self.oplog.entry_off_at(arena, *pos)?;
                Ok(Some(entry::term(arena, arena.handle_at(off)?)?))
            }
            None => Ok(None),
        }
    }

    // ---- timers ----

    fn reset_election_deadline(&mut self, now: u64) {
        let t = self.cfg.election_timeout_us;
        self.election_deadline = now + t + self.rng.random_range(0..=t);
    }

    /// Prime timers at startup. Single-node clusters elect themselves at
    /// once so the queue can drain without waiting out a timeout.
    pub fn start(&mut self, arena: &Arena, now: u64) -> Result<Vec<RaftEvent>> {
        self.reset_election_deadline(now);
        if self.cfg.peers.is_empty() {
            return self.start_election(arena, now);
        }
        Ok(Vec::new())
    }

    pub fn next_deadline(&self) -> u64 {
        match self.role {
            Role::Leader => self.heartbeat_deadline,
            _ => self.election_deadline,
        }
    }

    pub fn on_tick(&mut self, arena: &Arena, now: u64) -> Result<Vec<RaftEvent>> {
        let mut ev = Vec::new();
        match self.role {
            Role::Leader => {
                if now >= self.heartbeat_deadline {
                    self.heartbeat_deadline = now + self.cfg.heartbeat_us;
                    for peer in self.cfg.peers.clone() {
                        ev.extend(self.build_append_for(arena, peer, true)?);
                    }
                }
            }
            Role::Follower | Role::Candidate => {
                if now >= self.election_deadline {
                    ev.extend(self.start_election(arena, now)?);
                }
            }
        }
        Ok(ev)
    }

    fn start_election(&mut self, arena: &Arena, now: u64) -> Result<Vec<RaftEvent>> {
        self.metrics.elections_started += 1;
        self.current_term += 1;
        self.voted_for = Some(self.cfg.id);
        self.role = Role::Candidate;
        self.leader_hint = None;
        self.votes = 1;
        self.reset_election_deadline(now);
        // term and vote must be durable before anything leaves this node
        self.oplog.set_term_voted(arena, self.current_term, self.voted_for)?;
        if self.votes >= self.quorum() {
            return self.become_leader(arena, now);
        }
        let mut ev = Vec::new();
        for peer in &self.cfg.peers {
            ev.push(RaftEvent::Send {
                to: *peer,
                bytes: wire::encode(&Message::RequestVote {
                    term: self.current_term,
                    candidate: self.cfg.id,
                    last_index: self.last_index,
                    last_term: self.last_term,
                }),
            });
        }
        Ok(ev)
    }

    fn become_leader(&mut self, arena: &Arena, now: u64) -> Result<Vec<RaftEvent>> {
        self.role = Role::Leader;
        self.leader_hint = Some(self.cfg.id);
        self.heartbeat_deadline = now + self.cfg.heartbeat_us;
        for peer in &self.cfg.peers {
            self.next_index.insert(*peer, self.last_index + 1);
            self.match_index.insert(*peer, 0);
            self.sent_up_to.insert(*peer, self.last_index);
        }
        let mut ev = vec![RaftEvent::BecameLeader {
            term: self.current_term,
        }];
        // a no-op entry for the fresh term commits every inherited entry
        // and re-establishes the commit index after restarts
        let (pos, off, _) = self.append_internal(arena, Kind::Noop, &[], 0, 0)?;
        ev.push(RaftEvent::Appended {
            pos,
            off,
            kind: Kind::Noop,
        });
        ev.extend(self.publish_appends(arena)?);
        Ok(ev)
    }

    fn step_down(&mut self, arena: &Arena, term: u64, hint: Option<u64>) -> Result<Vec<RaftEvent>> {
        let was_leader = self.role == Role::Leader;
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
            self.oplog.set_term_voted(arena, term, None)?;
        }
        self.role = Role::Follower;
        self.votes = 0;
        if hint.is_some() {
            self.leader_hint = hint;
        }
        self.pending_publish.clear();
        Ok(if was_leader {
            vec![RaftEvent::SteppedDown {
                term: self.current_term,
            }]
        } else {
            Vec::new()
        })
    }

    // ---- leader append path ----

    /// Allocate a log entry for a client request (leader only). Returns
    /// (queue position, entry offset, raft index). Not yet published:
    /// [`RaftCore::publish_appends`] fences the batch and starts replication.
    pub fn client_append(
        &mut self,
        arena: &Arena,
        kind: Kind,
        payload: &[u8],
        client_id: u64,
        request_id: u64,
    ) -> Result<(u64, u64, u64)> {
        if self.role != Role::Leader {
            return Err(Error::NotLeader {
                hint: self.leader_hint,
            });
        }
        self.append_internal(arena, kind, payload, client_id, request_id)
    }

    fn append_internal(
        &mut self,
        arena: &Arena,
        kind: Kind,
        payload: &[u8],
        client_id: u64,
        request_id: u64,
    ) -> Result<(u64, u64, u64)> {
        if self.oplog.is_full() {
            return Err(Error::LogFull);
        }
        let index = self.last_index + 1;
        let h = entry::write_new(
            arena,
            kind,
            OpState::Received,
            self.current_term,
            index,
            client_id,
            request_id,
            payload,
            &self.payload_copies,
        )?;
        let pos = self.oplog.push(arena, h.offset())?;
        self.index_map.insert(index, pos);
        self.last_index = index;
        self.last_term = self.current_term;
        self.pending_publish.push(pos);
        Ok((pos, h.offset(), index))
    }

    /// Fence the append batch (one fence regardless of batch size), flip
    /// entries to REPLICATING, and send per-peer batches. Single-node
    /// clusters commit immediately.
    pub fn publish_appends(&mut self, arena: &Arena) -> Result<Vec<RaftEvent>> {
        let mut ev = Vec::new();
        if self.pending_publish.is_empty() {
            return Ok(ev);
        }
        arena.fence();
        for pos in std::mem::take(&mut self.pending_publish) {
            let off = self.oplog.entry_off_at(arena, pos)?;
            let h = arena.handle_at(off)?;
            entry::set_state(arena, h, OpState::Replicating)?;
            entry::flush_flags(arena, h)?;
        }
        arena.fence();
        for peer in self.cfg.peers.clone() {
            ev.extend(self.build_append_for(arena, peer, false)?);
        }
        ev.extend(self.try_advance_commit(arena)?);
        Ok(ev)
    }

    /// Build the next AppendBatch (or empty heartbeat) for one peer. Entry
    /// payloads are serialized in place from the arena; the per-peer message
    /// shares those bytes and costs no in-process payload copy.
    fn build_append_for(&mut self, arena: &Arena, peer: u64, retransmit: bool) -> Result<Vec<RaftEvent>> {
        let mut next = *self.next_index.get(&peer).unwrap_or(&(self.last_index + 1));
        if next <= self.gc_index {
            // peer is behind the collected prefix; best effort from the
            // watermark (the log is sized so this only happens to dead peers)
            next = self.gc_index + 1;
            self.next_index.insert(peer, next);
        }
        if !retransmit {
            let streamed = *self.sent_up_to.get(&peer).unwrap_or(&0);
            next = next.max(streamed + 1);
            if next > self.last_index {
                return Ok(Vec::new()); // nothing new; heartbeats cover gaps
            }
        }
        let prev_index = next - 1;
        let prev_term = match self.term_at(arena, prev_index)? {
            Some(t) => t,
            None => {
                return Err(Error::CorruptQueue(format!(
                    "no term for prev index {prev_index}"
                )))
            }
        };
        let mut enc = BatchEncoder::new(
            self.current_term,
            self.cfg.id,
            prev_index,
            prev_term,
            self.commit_index,
            self.all_peers_hold(),
        );
        let mut n = 0u64;
        let hi = self.last_index.min(prev_index + self.cfg.batch_cap as u64);
        for idx in next..=hi.max(prev_index) {
            let pos = match self.index_map.get(&idx) {
                Some(p) => *p,
                None => break,
            };
            let off = self.oplog.entry_off_at(arena, pos)?;
            let h = arena.handle_at(off)?;
            let term = entry::term(arena, h)?;
            let kind = arena.flag_load(h, entry::OFF_KIND)?;
            let client_id = entry::client_id(arena, h)?;
            let request_id = entry::request_id(arena, h)?;
            if self.cfg.force_copy {
                // ablation: stage the payload per peer before serializing
                let staged = entry::payload(arena, h)?.to_vec();
                self.payload_copies.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                enc.push_entry(term, idx, kind, client_id, request_id, &staged);
            } else {
                enc.push_entry(term, idx, kind, client_id, request_id, entry::payload(arena, h)?);
            }
            n += 1;
        }
        self.metrics.batches_sent += 1;
        if n > 0 {
            self.metrics.nonempty_batches += 1;
            self.metrics.batch_entries_sum += n;
            let streamed = self.sent_up_to.entry(peer).or_insert(0);
            *streamed = (*streamed).max(prev_index + n);
        }
        Ok(vec![RaftEvent::Send {
            to: peer,
            bytes: enc.finish(),
        }])
    }

    fn try_advance_commit(&mut self, arena: &Arena) -> Result<Vec<RaftEvent>> {
        if self.role != Role::Leader {
            return Ok(Vec::new());
        }
        let mut matches: Vec<u64> = self
            .cfg
            .peers
            .iter()
            .map(|p| *self.match_index.get(p).unwrap_or(&0))
            .collect();
        matches.push(self.last_index);
        matches.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = matches[self.quorum() - 1];
        if candidate <= self.commit_index {
            return Ok(Vec::new());
        }
        // only entries of the current term commit by counting (earlier terms
        // commit transitively)
        if self.term_at(arena, candidate)? != Some(self.current_term) {
            return Ok(Vec::new());
        }
        self.advance_commit_to(arena, candidate)
    }

    /// Mark newly committed entries REPLICATED (never regressing COMPLETED or
    /// FAILED flags restored from a previous incarnation) and emit events.
    fn advance_commit_to(&mut self, arena: &Arena, new_commit: u64) -> Result<Vec<RaftEvent>> {
        let mut ev = Vec::new();
        if new_commit <= self.commit_index {
            return Ok(ev);
        }
        let mut flushed_any = false;
        for idx in self.commit_index + 1..=new_commit {
            let pos = match self.index_map.get(&idx) {
                Some(p) => *p,
                None => {
                    return Err(Error::CorruptQueue(format!(
                        "commit index {idx} not in log"
                    )))
                }
            };
            let off = self.oplog.entry_off_at(arena, pos)?;
            let h = arena.handle_at(off)?;
            let state = entry::state(arena, h)?;
            if matches!(state, Some(OpState::Received) | Some(OpState::Replicating)) {
                entry::set_state(arena, h, OpState::Replicated)?;
                entry::flush_flags(arena, h)?;
                flushed_any = true;
            }
            let kind = entry::kind(arena, h)?.unwrap_or(Kind::Update);
            ev.push(RaftEvent::Committed {
                index: idx,
                pos,
                off,
                kind,
            });
        }
        if flushed_any {
            arena.fence();
        }
        self.commit_index = new_commit;
        Ok(ev)
    }

    // ---- message handling ----

    pub fn on_message(
        &mut self,
        arena: &Arena,
        from: u64,
        msg: Message,
        now: u64,
    ) -> Result<Vec<RaftEvent>> {
        match msg {
            Message::RequestVote {
                term,
                candidate,
                last_index,
                last_term,
            } => self.on_request_vote(arena, term, candidate, last_index, last_term, now),
            Message::Vote { term, from, granted } => self.on_vote(arena, term, from, granted, now),
            Message::AppendBatch {
                term,
                leader,
                prev_index,
                prev_term,
                commit,
                gc_safe,
                entries,
            } => {
                self.gc_safe = self.gc_safe.max(gc_safe);
                self.on_append_batch(arena, term, leader, prev_index, prev_term, commit, entries, now)
            }
            Message::AppendAck {
                term,
                from: acker,
                success,
                last_index,
            } => self.on_append_ack(arena, term, acker, success, last_index),
            Message::ClientRequest { .. } | Message::ClientReply { .. } => {
                // client traffic is handled by the runtime layer
                let _ = from;
                Ok(Vec::new())
            }
        }
    }

    fn on_request_vote(
        &mut self,
        arena: &Arena,
        term: u64,
        candidate: u64,
        last_index: u64,
        last_term: u64,
        now: u64,
    ) -> Result<Vec<RaftEvent>> {
        let mut ev = Vec::new();
        if term < self.current_term {
            ev.push(RaftEvent::Send {
                to: candidate,
                bytes: wire::encode(&Message::Vote {
                    term: self.current_term,
                    from: self.cfg.id,
                    granted: false,
                }),
            });
            return Ok(ev);
        }
        if term > self.current_term {
            ev.extend(self.step_down(arena, term, None)?);
        }
        let up_to_date = (last_term, last_index) >= (self.last_term, self.last_index);
        let granted = up_to_date && self.voted_for.map_or(true, |v| v == candidate);
        if granted {
            self.voted_for = Some(candidate);
            self.oplog.set_term_voted(arena, self.current_term, self.voted_for)?;
            self.reset_election_deadline(now);
        }
        ev.push(RaftEvent::Send {
            to: candidate,
            bytes: wire::encode(&Message::Vote {
                term: self.current_term,
                from: self.cfg.id,
                granted,
            }),
        });
        Ok(ev)
    }

    fn on_vote(
        &mut self,
        arena: &Arena,
        term: u64,
        from: u64,
        granted: bool,
        now: u64,
    ) -> Result<Vec<RaftEvent>> {
        let _ = from;
        if term > self.current_term {
            return self.step_down(arena, term, None);
        }
        if self.role != Role::Candidate || term < self.current_term || !granted {
            return Ok(Vec::new());
        }
        self.votes += 1;
        if self.votes >= self.quorum() {
            return self.become_leader(arena, now);
        }
        Ok(Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append_batch(
        &mut self,
        arena: &Arena,
        term: u64,
        leader: u64,
        prev_index: u64,
        prev_term: u64,
        commit: u64,
        entries: Vec<wire::WireEntry>,
        now: u64,
    ) -> Result<Vec<RaftEvent>> {
        let mut ev = Vec::new();
        if term < self.current_term {
            ev.push(RaftEvent::Send {
                to: leader,
                bytes: wire::encode(&Message::AppendAck {
                    term: self.current_term,
                    from: self.cfg.id,
                    success: false,
                    last_index: 0,
                }),
            });
            return Ok(ev);
        }
        ev.extend(self.step_down(arena, term, Some(leader))?);
        self.leader_hint = Some(leader);
        self.reset_election_deadline(now);

        // consistency check at prev
        let consistent = if prev_index > self.last_index {
            false
        } else {
            match self.term_at(arena, prev_index)? {
                Some(t) => t == prev_term,
                // below the gc watermark: committed and long since verified
                None => true,
            }
        };
        if !consistent {
            let hint = if prev_index > self.last_index {
                self.last_index + 1
            } else {
                prev_index
            };
            ev.push(RaftEvent::Send {
                to: leader,
                bytes: wire::encode(&Message::AppendAck {
                    term: self.current_term,
                    from: self.cfg.id,
                    success: false,
                    last_index: hint,
                }),
            });
            return Ok(ev);
        }

        let eff_prev = prev_index.max(self.gc_index);
        let confirmed = prev_index + entries.len() as u64;
        let mut need_fence = false;
        for e in entries {
            if e.index <= eff_prev {
                continue;
            }
            match self.term_at(arena, e.index)? {
                Some(t) if t == e.term => continue, // duplicate delivery
                Some(_) => {
                    // conflicting suffix; the replacement append below sets
                    // the fence flag
                    ev.extend(self.truncate_from(arena, e.index)?);
                }
                None => {
                    if e.index != self.last_index + 1 {
                        // gap: the leader will retry from our hint
                        ev.push(RaftEvent::Send {
                            to: leader,
                            bytes: wire::encode(&Message::AppendAck {
                                term: self.current_term,
                                from: self.cfg.id,
                                success: false,
                                last_index: self.last_index + 1,
                            }),
                        });
                        return Ok(ev);
                    }
                }
            }
            let kind = Kind::from_u8(e.kind).ok_or(Error::MalformedMessage)?;
            let h = entry::write_new(
                arena,
                kind,
                OpState::Replicating,
                e.term,
                e.index,
                e.client_id,
                e.request_id,
                &e.payload,
                &self.payload_copies,
            )?;
            let pos = self.oplog.push(arena, h.offset())?;
            self.index_map.insert(e.index, pos);
            self.last_index = e.index;
            self.last_term = e.term;
            ev.push(RaftEvent::Appended {
                pos,
                off: h.offset(),
                kind,
            });
            need_fence = true;
        }
        if need_fence {
            // everything above (entries, slots, head, FAILED flags) becomes
            // durable before the ack leaves this node
            arena.fence();
        }
        ev.push(RaftEvent::Send {
            to: leader,
            bytes: wire::encode(&Message::AppendAck {
                term: self.current_term,
                from: self.cfg.id,
                success: true,
                last_index: confirmed,
            }),
        });
        let new_commit = commit.min(confirmed);
        if new_commit > self.commit_index {
            ev.extend(self.advance_commit_to(arena, new_commit)?);
        }
        Ok(ev)
    }

    /// Flag `[from_index, last]` as FAILED_REPLICATION and drop those indices
    /// from the raft view. The entries stay queued for the scheduler's error
    /// path; flag flushes ride the caller's batch fence.
    fn truncate_from(&mut self, arena: &Arena, from_index: u64) -> Result<Vec<RaftEvent>> {
        debug_assert!(from_index > self.commit_index, "never truncate committed entries");
        let mut ev = Vec::new();
        let doomed = self.index_map.split_off(&from_index);
        for (_, pos) in doomed {
            let off = self.oplog.entry_off_at(arena, pos)?;
            let h = arena.handle_at(off)?;
            entry::set_state(arena, h, OpState::FailedReplication)?;
            entry::flush_flags(arena, h)?;
            ev.push(RaftEvent::Failed { pos, off });
        }
        let (last_index, last_term) = match self.index_map.iter().next_back() {
            Some((idx, pos)) => {
                let off = self.oplog.entry_off_at(arena, *pos)?;
                (*idx, entry::term(arena, arena.handle_at(off)?)?)
            }
            None => (self.gc_index, self.gc_term),
        };
        self.last_index = last_index;
        self.last_term = last_term;
        Ok(ev)
    }

    fn on_append_ack(
        &mut self,
        arena: &Arena,
        term: u64,
        from: u64,
        success: bool,
        last_index: u64,
    ) -> Result<Vec<RaftEvent>> {
        if term > self.current_term {
            return self.step_down(arena, term, None);
        }
        if self.role != Role::Leader || term < self.current_term {
            return Ok(Vec::new());
        }
        self.metrics.acks_handled += 1;
        let mut ev = Vec::new();
        if success {
            let m = self.match_index.entry(from).or_insert(0);
            if last_index > *m {
                *m = last_index;
            }
            self.next_index.insert(from, last_index + 1);
            ev.extend(self.try_advance_commit(arena)?);
            if last_index < self.last_index {
                ev.extend(self.build_append_for(arena, from, false)?);
            }
        } else {
            let cur = *self.next_index.get(&from).unwrap_or(&(self.last_index + 1));
            let floor = self.match_index.get(&from).unwrap_or(&0) + 1;
            let mut new_next = last_index.max(floor).max(1);
            if new_next >= cur && cur > floor {
                new_next = cur - 1;
            }
            self.next_index.insert(from, new_next);
            self.sent_up_to.insert(from, new_next.saturating_sub(1));
            ev.extend(self.build_append_for(arena, from, true)?);
        }
        Ok(ev)
    }

    // ---- garbage collection ----

    /// Free the maximal contiguous prefix of entries that are flagged for gc
    /// and terminally COMPLETED or FAILED, stopping at `below_pos` (the
    /// scheduler's lowest still-queued position — freed entries must already
    /// have left the dispatch queue). The tail (and gc watermark) is
    /// persisted before any block is freed. On the leader, live entries are
    /// retained until every peer has them (retransmission needs the bytes).
    pub fn gc_advance(&mut self, arena: &Arena, below_pos: u64) -> Result<u64> {
        let limit = if self.role == Role::Leader {
            self.all_peers_hold()
        } else {
            // only what the leader confirmed every peer holds: a node that
            // collected further and later won an election could never feed
            // a lagging peer (there is no snapshot transfer)
            self.commit_index.min(self.gc_safe)
        };
        let mut freed: Vec<(u64, Option<u64>)> = Vec::new(); // (off, live index)
        let mut watermark = (self.gc_index, self.gc_term);
        let mut p = self.oplog.tail();
        while p < self.oplog.head().min(below_pos) {
            let off = self.oplog.entry_off_at(arena, p)?;
            let h = arena.handle_at(off)?;
            if !entry::gc_flag(arena, h)? {
                break;
            }
            let state = entry::state(arena, h)?;
            if !matches!(
                state,
                Some(OpState::Completed) | Some(OpState::FailedReplication)
            ) {
                break;
            }
            let index = entry::index(arena, h)?;
            let live = self.index_map.get(&index) == Some(&p);
            if live {
                if index > limit {
                    break;
                }
                watermark = (index, entry::term(arena, h)?);
                freed.push((off, Some(index)));
            } else {
                freed.push((off, None));
            }
            p += 1;
        }
        if freed.is_empty() {
            return Ok(0);
        }
        self.oplog.advance_tail(arena, p, watermark.0, watermark.1)?;
        self.gc_index = watermark.0;
        self.gc_term = watermark.1;
        let count = freed.len() as u64;
        for (off, live_idx) in freed {
            if let Some(idx) = live_idx {
                self.index_map.remove(&idx);
            }
            arena.free_batched(arena.handle_at(off)?)?;
        }
        arena.fence();
        Ok(count)
    }
}
