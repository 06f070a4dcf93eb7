//! Deterministic discrete-event cluster simulator.
//!
//! Everything runs under a virtual microsecond clock from one seeded RNG:
//! link latency and jitter, message drops, partitions, node kills and
//! restarts, executor latency, and scripted client sessions. Identical
//! (seed, fault schedule, workload) triples produce identical traces, so
//! failures replay exactly.
//!
//! Node kills preserve exactly what the arena's crash model says is durable
//! (with strict arenas, the fenced image); restarts run the full recovery
//! path. Executions occupy virtual time: an operation dispatched into the
//! ready set completes (and applies its effects) at a later event, which is
//! what creates genuine commutative overlap for the scheduler under test.

use crate::error::Result;
use crate::logrep::wire::{self, Message, RequestKind};
use crate::logrep::Kind;
use crate::net::checks::SafetyChecker;
use crate::net::client::{ClientPolicy, Status, Verdict};
use crate::pheap::ArenaMode;
use crate::runtime::{NodeOut, Replica, ReplicaConfig};
use crate::sched::QItem;
use crate::service::Service;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

pub const CLIENT_BASE: u64 = 1000;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub replicas: u64,
    pub seed: u64,
    pub election_timeout_us: u64,
    pub heartbeat_us: u64,
    pub link_latency_us: u64,
    pub link_jitter_us: u64,
    pub batch_cap: usize,
    pub log_capacity: u64,
    pub arena_capacity: u64,
    pub arena_mode: ArenaMode,
    pub executors: usize,
    pub exec_latency_us: u64,
    pub serial: bool,
    pub force_copy: bool,
    pub ack_on_commit: bool,
    pub drop_rate: f64,
    pub client_timeout_us: u64,
    pub client_retry_backoff_us: u64,
    pub client_attempts: u32,
    pub max_virtual_us: u64,
    /// Quiet tail after the last client finishes, letting followers catch
    /// up before end-of-run checks.
    pub settle_us: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            replicas: 3,
            seed: 0,
            election_timeout_us: 100_000,
            heartbeat_us: 30_000,
            link_latency_us: 500,
            link_jitter_us: 200,
            batch_cap: 32,
            log_capacity: 1 << 16,
            arena_capacity: 16 << 20,
            arena_mode: ArenaMode::Fast,
            executors: 4,
            exec_latency_us: 150,
            serial: false,
            force_copy: false,
            ack_on_commit: false,
            drop_rate: 0.0,
            client_timeout_us: 40_000,
            client_retry_backoff_us: 2_000,
            client_attempts: 200,
            max_virtual_us: 60_000_000,
            settle_us: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultEvent {
    Kill { node: u64 },
    /// Kill whichever node the simulator last saw win an election.
    KillLeader,
    Restart { node: u64 },
    /// Disjoint groups; ids may include CLIENT_BASE+i to partition clients.
    /// Anything unlisted joins group 0.
    Partition { groups: Vec<Vec<u64>> },
    Heal,
    SetDropRate { rate: f64 },
}

pub type FaultSchedule = Vec<(u64, FaultEvent)>;

#[derive(Debug, Clone)]
pub enum WorkloadOp {
    Update(Vec<u8>),
    Read(Vec<u8>),
}

impl WorkloadOp {
    pub fn payload(&self) -> &[u8] {
        match self {
            WorkloadOp::Update(p) | WorkloadOp::Read(p) => p,
        }
    }

    fn kind(&self) -> RequestKind {
        match self {
            WorkloadOp::Update(_) => RequestKind::Update,
            WorkloadOp::Read(_) => RequestKind::Read,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientScript {
    pub start_us: u64,
    pub gap_us: u64,
    pub ops: Vec<WorkloadOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    MsgSent { at: u64, from: u64, to: u64, bytes: Vec<u8> },
    MsgDropped { at: u64, from: u64, to: u64 },
    Leader { at: u64, node: u64, term: u64, is_leader: bool },
    Committed { at: u64, node: u64, index: u64, term: u64, client_id: u64, request_id: u64 },
    ClientSent { at: u64, client: u64, request_id: u64, to: u64 },
    ClientDone { at: u64, client: u64, request_id: u64, status: Status, response: Vec<u8> },
    NodeKilled { at: u64, node: u64 },
    NodeRestarted { at: u64, node: u64 },
}

pub type Trace = Vec<TraceEvent>;

/// One finished client operation, in issue order.
#[derive(Debug, Clone)]
pub struct OpResult {
    pub client_id: u64,
    pub request_id: u64,
    pub is_update: bool,
    pub request: Vec<u8>,
    pub status: Status,
    pub response: Vec<u8>,
    /// Raft index for acknowledged updates (from the commit trace).
    pub index: Option<u64>,
    pub issued_at: u64,
    pub done_at: u64,
}

#[derive(Debug)]
pub struct NodeEnd {
    pub id: u64,
    pub alive: bool,
    pub is_leader: bool,
    pub term: u64,
    pub commit_index: u64,
    pub digest: Vec<u8>,
    pub recover_violations: Vec<String>,
    pub log_identity: Vec<(u64, u64, u64, u64)>,
    pub gc_index: u64,
}

#[derive(Debug)]
pub struct SimReport {
    pub trace: Trace,
    pub results: Vec<OpResult>,
    pub acked_updates: Vec<(u64, u64)>,
    pub violations: Vec<String>,
    pub nodes: Vec<NodeEnd>,
    pub finished_at: u64,
}

#[derive(Debug)]
enum Ev {
    Deliver { to: u64, from: u64, bytes: Vec<u8> },
    ClientDeliver { client: usize, msg: Message },
    NodeTick { node: usize, epoch: u64 },
    ExecDone { node: usize, epoch: u64, item: QItem },
    ClientWake { client: usize, attempt: u64 },
    Fault(FaultEvent),
}

struct InFlight {
    op: WorkloadOp,
    request_id: u64,
    target: u64,
    attempt: u64,
    issued_at: u64,
}

struct ClientState {
    id: u64,
    policy: ClientPolicy,
    ops: std::collections::VecDeque<WorkloadOp>,
    gap_us: u64,
    current: Option<InFlight>,
    next_request_id: u64,
    attempt_seq: u64,
    done: bool,
}

pub struct SimNet {
    cfg: SimConfig,
    nodes: Vec<Option<Replica>>,
    node_epoch: Vec<u64>,
    killed_images: Vec<Option<Vec<u8>>>,
    service_factory: Arc<dyn Fn() -> Arc<dyn Service> + Send + Sync>,
    queue: BinaryHeap<Reverse<(u64, u64, usize)>>,
    events: Vec<Option<Ev>>,
    now: u64,
    seq: u64,
    rng: ChaCha8Rng,
    partition: Vec<u64>, // group per node; clients appended after nodes
    drop_rate: f64,
    clients: Vec<ClientState>,
    trace: Trace,
    results: Vec<OpResult>,
    checker: SafetyChecker,
    tick_scheduled_at: Vec<u64>,
    last_client_done: u64,
    last_fault_at: u64,
    current_leader: Option<u64>,
}

impl SimNet {
    pub fn new(
        cfg: SimConfig,
        service_factory: Arc<dyn Fn() -> Arc<dyn Service> + Send + Sync>,
    ) -> Result<SimNet> {
        let n = cfg.replicas;
        let mut nodes = Vec::new();
        for id in 0..n {
            let rcfg = ReplicaConfig {
                raft: crate::logrep::RaftConfig {
                    id,
                    peers: (0..n).filter(|p| *p != id).collect(),
                    election_timeout_us: cfg.election_timeout_us,
                    heartbeat_us: cfg.heartbeat_us,
                    batch_cap: cfg.batch_cap,
                    log_capacity: cfg.log_capacity,
                    seed: cfg.seed,
                    force_copy: cfg.force_copy,
                },
                executors: cfg.executors,
                arena_capacity: cfg.arena_capacity,
                arena_mode: cfg.arena_mode,
                force_copy: cfg.force_copy,
                serial: cfg.serial,
                ack_on_commit: cfg.ack_on_commit,
            };
            nodes.push(Some(Replica::create(rcfg, (service_factory)())?));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51u64.wrapping_mul(0x9e37_79b9));
        let checker = SafetyChecker::new(n);
        Ok(SimNet {
            node_epoch: vec![0; n as usize],
            killed_images: vec![None; n as usize],
            partition: vec![0; n as usize],
            tick_scheduled_at: vec![u64::MAX; n as usize],
            cfg,
            nodes,
            service_factory,
            queue: BinaryHeap::new(),
            events: Vec::new(),
            now: 0,
            seq: 0,
            rng,
            drop_rate: 0.0,
            clients: Vec::new(),
            trace: Vec::new(),
            results: Vec::new(),
            checker,
            last_client_done: 0,
            last_fault_at: 0,
            current_leader: None,
        })
    }

    fn push_event(&mut self, at: u64, ev: Ev) {
        let idx = self.events.len();
        self.events.push(Some(ev));
        self.seq += 1;
        self.queue.push(Reverse((at.max(self.now), self.seq, idx)));
    }

    fn group_of(&self, id: u64) -> u64 {
        if id >= CLIENT_BASE {
            let c = (id - CLIENT_BASE) as usize;
            *self
                .partition
                .get(self.nodes.len() + c)
                .unwrap_or(&0)
        } else {
            *self.partition.get(id as usize).unwrap_or(&0)
        }
    }

    fn blocked(&self, a: u64, b: u64) -> bool {
        self.group_of(a) != self.group_of(b)
    }

    fn latency(&mut self) -> u64 {
        let jitter = if self.cfg.link_jitter_us > 0 {
            self.rng.random_range(0..=self.cfg.link_jitter_us)
        } else {
            0
        };
        self.cfg.link_latency_us + jitter
    }

    fn dropped(&mut self) -> bool {
        self.drop_rate > 0.0 && self.rng.random::<f64>() < self.drop_rate
    }

    /// Run the cluster under the given faults and client scripts.
    pub fn run(mut self, faults: FaultSchedule, scripts: Vec<ClientScript>) -> Result<SimReport> {
        self.drop_rate = self.cfg.drop_rate;
        // clients
        for (i, script) in scripts.into_iter().enumerate() {
            let nodes: Vec<u64> = (0..self.cfg.replicas).collect();
            self.clients.push(ClientState {
                id: CLIENT_BASE + i as u64,
                policy: ClientPolicy::new(nodes, self.cfg.client_attempts),
                ops: script.ops.into(),
                gap_us: script.gap_us,
                current: None,
                next_request_id: 0,
                attempt_seq: 0,
                done: false,
            });
            self.push_event(script.start_us, Ev::ClientWake { client: i, attempt: 0 });
        }
        self.partition.resize(self.nodes.len() + self.clients.len(), 0);
        for (at, f) in faults {
            self.last_fault_at = self.last_fault_at.max(at);
            self.push_event(at, Ev::Fault(f));
        }
        // boot
        for i in 0..self.nodes.len() {
            self.with_node(i, |rep, now| rep.start(now))?;
        }

        while let Some(Reverse((at, _, idx))) = self.queue.pop() {
            if at > self.cfg.max_virtual_us {
                break;
            }
            self.now = at;
            let quiesce_after = self.last_client_done.max(self.last_fault_at) + self.cfg.settle_us;
            if self.clients_finished() && self.now > quiesce_after {
                break;
            }
            let ev = self.events[idx].take().expect("event consumed once");
            self.dispatch(ev)?;
        }

        // end-of-run node summaries and final checks
        let mut nodes_end = Vec::new();
        for (i, slot) in self.nodes.iter().enumerate() {
            if let Some(rep) = slot {
                nodes_end.push(NodeEnd {
                    id: i as u64,
                    alive: true,
                    is_leader: rep.is_leader(),
                    term: rep.raft.current_term(),
                    commit_index: rep.raft.commit_index(),
                    digest: rep.state_digest()?,
                    recover_violations: rep.recover_check()?,
                    log_identity: rep.log_identity()?,
                    gc_index: rep.raft.gc_index(),
                });
            } else {
                nodes_end.push(NodeEnd {
                    id: i as u64,
                    alive: false,
                    is_leader: false,
                    term: 0,
                    commit_index: 0,
                    digest: vec![],
                    recover_violations: vec![],
                    log_identity: vec![],
                    gc_index: 0,
                });
            }
        }
        let acked: Vec<(u64, u64)> = self
            .results
            .iter()
            .filter(|r| r.is_update && r.status == Status::Ok)
            .map(|r| (r.client_id, r.request_id))
            .collect();
        let mut violations = self.checker.violations().to_vec();
        violations.extend(self.checker.final_checks(&nodes_end, &acked));
        // resolve indices for acked updates from the commit trace
        let commit_of = self.checker.commit_index_of();
        for r in &mut self.results {
            if r.is_update && r.status == Status::Ok {
                r.index = commit_of.get(&(r.client_id, r.request_id)).copied();
            }
        }
        Ok(SimReport {
            trace: self.trace,
            results: self.results,
            acked_updates: acked,
            violations,
            nodes: nodes_end,
            finished_at: self.now,
        })
    }

    fn clients_finished(&self) -> bool {
        !self.clients.is_empty() && self.clients.iter().all(|c| c.done)
    }

    fn dispatch(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::Deliver { to, from, bytes } => {
                let node = to as usize;
                if self.nodes.get(node).map_or(true, |n| n.is_none()) {
                    return Ok(());
                }
                match wire::decode(&bytes) {
                    Ok(Message::ClientRequest {
                        kind,
                        client_id,
                        request_id,
                        payload,
                    }) => {
                        let token = client_id - CLIENT_BASE;
                        self.with_node(node, |rep, now| {
                            let mut outs =
                                rep.on_client(token, kind, client_id, request_id, &payload, now)?;
                            outs.extend(rep.flush_now()?);
                            Ok(outs)
                        })?;
                    }
                    Ok(_) => {
                        self.with_node(node, |rep, now| rep.on_peer(from, &bytes, now))?;
                    }
                    Err(_) => {}
                }
            }
            Ev::ClientDeliver { client, msg } => {
                self.client_on_reply(client, msg)?;
            }
            Ev::NodeTick { node, epoch } => {
                if self.node_epoch[node] != epoch {
                    return Ok(());
                }
                self.tick_scheduled_at[node] = u64::MAX;
                self.with_node(node, |rep, now| rep.on_tick(now))?;
            }
            Ev::ExecDone { node, epoch, item } => {
                if self.node_epoch[node] != epoch || self.nodes[node].is_none() {
                    return Ok(());
                }
                let outcome = self.nodes[node].as_ref().unwrap().run_exec(item)?;
                self.with_node(node, |rep, now| rep.on_exec_done(item, outcome, now))?;
            }
            Ev::ClientWake { client, attempt } => {
                self.client_wake(client, attempt)?;
            }
            Ev::Fault(f) => self.apply_fault(f)?,
        }
        Ok(())
    }

    fn with_node(
        &mut self,
        node: usize,
        f: impl FnOnce(&mut Replica, u64) -> Result<Vec<NodeOut>>,
    ) -> Result<()> {
        let now = self.now;
        let outs = match self.nodes[node].as_mut() {
            Some(rep) => f(rep, now)?,
            None => return Ok(()),
        };
        self.route(node as u64, outs)?;
        // keep the node's next deadline scheduled
        if let Some(rep) = self.nodes[node].as_ref() {
            let dl = rep.next_deadline().max(self.now + 1);
            if dl < self.tick_scheduled_at[node] {
                self.tick_scheduled_at[node] = dl;
                let epoch = self.node_epoch[node];
                self.push_event(dl, Ev::NodeTick { node, epoch });
            }
        }
        Ok(())
    }

    fn route(&mut self, from: u64, outs: Vec<NodeOut>) -> Result<()> {
        for out in outs {
            match out {
                NodeOut::Send { to, bytes } => {
                    self.trace.push(TraceEvent::MsgSent {
                        at: self.now,
                        from,
                        to,
                        bytes: bytes.clone(),
                    });
                    if self.blocked(from, to) || self.dropped() {
                        self.trace.push(TraceEvent::MsgDropped { at: self.now, from, to });
                    } else {
                        let lat = self.latency();
                        self.push_event(self.now + lat, Ev::Deliver { to, from, bytes });
                    }
                }
                NodeOut::Reply { token, msg } => {
                    let client = token as usize;
                    let cid = CLIENT_BASE + token;
                    if self.blocked(from, cid) || self.dropped() {
                        self.trace.push(TraceEvent::MsgDropped { at: self.now, from, to: cid });
                    } else {
                        let lat = self.latency();
                        self.push_event(self.now + lat, Ev::ClientDeliver { client, msg });
                    }
                }
                NodeOut::Exec { item } => {
                    let node = from as usize;
                    let base = self.cfg.exec_latency_us.max(1);
                    let lat = base / 2 + self.rng.random_range(0..=base);
                    let epoch = self.node_epoch[node];
                    self.push_event(self.now + lat, Ev::ExecDone { node, epoch, item });
                }
                NodeOut::LeaderChange { term, is_leader } => {
                    self.trace.push(TraceEvent::Leader {
                        at: self.now,
                        node: from,
                        term,
                        is_leader,
                    });
                    if is_leader {
                        self.current_leader = Some(from);
                    } else if self.current_leader == Some(from) {
                        self.current_leader = None;
                    }
                    if is_leader {
                        let completeness = self.nodes[from as usize]
                            .as_ref()
                            .map(|rep| {
                                Ok::<_, crate::error::Error>((
                                    rep.log_identity()?,
                                    rep.raft.gc_index(),
                                ))
                            })
                            .transpose()?;
                        self.checker.on_leader(self.now, from, term, completeness);
                    }
                }
                NodeOut::CommittedEntry {
                    index,
                    term,
                    kind,
                    client_id,
                    request_id,
                } => {
                    self.trace.push(TraceEvent::Committed {
                        at: self.now,
                        node: from,
                        index,
                        term,
                        client_id,
                        request_id,
                    });
                    self.checker.on_commit(
                        from,
                        index,
                        term,
                        kind == Kind::Update,
                        client_id,
                        request_id,
                    );
                }
            }
        }
        Ok(())
    }

    // ---- clients ----

    fn client_wake(&mut self, c: usize, attempt: u64) -> Result<()> {
        let now = self.now;
        let (resend, issue_new) = {
            let cl = &mut self.clients[c];
            if cl.done {
                return Ok(());
            }
            match &cl.current {
                Some(inf) => {
                    // timeout wake for the current attempt only
                    if inf.attempt != attempt {
                        return Ok(());
                    }
                    cl.policy.on_timeout(inf.target);
                    (true, false)
                }
                None => (false, true),
            }
        };
        if resend {
            self.client_send(c, None)?;
        } else if issue_new {
            let next = self.clients[c].ops.pop_front();
            match next {
                Some(op) => {
                    let cl = &mut self.clients[c];
                    cl.next_request_id += 1;
                    let rid = cl.next_request_id;
                    let issued_at = now;
                    self.client_send(c, Some((op, rid, issued_at)))?;
                }
                None => {
                    self.clients[c].done = true;
                    self.last_client_done = now;
                }
            }
        }
        Ok(())
    }

    /// Send (or resend) the client's current operation.
    fn client_send(&mut self, c: usize, fresh: Option<(WorkloadOp, u64, u64)>) -> Result<()> {
        let now = self.now;
        if let Some((op, rid, issued_at)) = fresh {
            self.clients[c].current = Some(InFlight {
                op,
                request_id: rid,
                target: 0,
                attempt: 0,
                issued_at,
            });
        }
        let target = self.clients[c].policy.next_target();
        let Some(target_out) = target else {
            // retry budget exhausted
            let cl = &mut self.clients[c];
            let inf = cl.current.take().expect("operation in flight");
            let rid = inf.request_id;
            self.results.push(OpResult {
                client_id: cl.id,
                request_id: rid,
                is_update: matches!(inf.op, WorkloadOp::Update(_)),
                request: inf.op.payload().to_vec(),
                status: Status::NoLeader,
                response: vec![],
                index: None,
                issued_at: inf.issued_at,
                done_at: now,
            });
            let id = cl.id;
            let gap = cl.gap_us;
            self.trace.push(TraceEvent::ClientDone {
                at: now,
                client: id,
                request_id: rid,
                status: Status::NoLeader,
                response: vec![],
            });
            self.push_event(now + gap.max(1), Ev::ClientWake { client: c, attempt: 0 });
            return Ok(());
        };
        let (msg, cl_id, rid, attempt) = {
            let cl = &mut self.clients[c];
            cl.attempt_seq += 1;
            let attempt = cl.attempt_seq;
            let inf = cl.current.as_mut().expect("operation in flight");
            inf.attempt = attempt;
            inf.target = target_out;
            (
                Message::ClientRequest {
                    kind: inf.op.kind(),
                    client_id: cl.id,
                    request_id: inf.request_id,
                    payload: inf.op.payload().to_vec(),
                },
                cl.id,
                inf.request_id,
                attempt,
            )
        };
        self.trace.push(TraceEvent::ClientSent {
            at: now,
            client: cl_id,
            request_id: rid,
            to: target_out,
        });
        let bytes = wire::encode(&msg);
        if !(self.blocked(cl_id, target_out) || self.dropped()) {
            let lat = self.latency();
            self.push_event(
                now + lat,
                Ev::Deliver {
                    to: target_out,
                    from: cl_id,
                    bytes,
                },
            );
        } else {
            self.trace.push(TraceEvent::MsgDropped {
                at: now,
                from: cl_id,
                to: target_out,
            });
        }
        // timeout wake
        self.push_event(
            now + self.cfg.client_timeout_us,
            Ev::ClientWake { client: c, attempt },
        );
        Ok(())
    }

    fn client_on_reply(&mut self, c: usize, msg: Message) -> Result<()> {
        let now = self.now;
        let Message::ClientReply {
            status,
            leader_hint,
            request_id,
            payload,
        } = msg
        else {
            return Ok(());
        };
        enum Next {
            Ignore,
            Done(Status, Vec<u8>),
            Retry,
        }
        let next = {
            let cl = &mut self.clients[c];
            match &cl.current {
                Some(inf) if inf.request_id == request_id => {
                    let from = inf.target;
                    match cl.policy.on_reply(from, status, leader_hint) {
                        Verdict::Done(s) => Next::Done(s, payload),
                        Verdict::Retry => Next::Retry,
                    }
                }
                _ => Next::Ignore, // stale reply from an earlier attempt
            }
        };
        match next {
            Next::Ignore => {}
            Next::Done(s, payload) => {
                let cl = &mut self.clients[c];
                let inf = cl.current.take().expect("in flight");
                self.results.push(OpResult {
                    client_id: cl.id,
                    request_id,
                    is_update: matches!(inf.op, WorkloadOp::Update(_)),
                    request: inf.op.payload().to_vec(),
                    status: s,
                    response: payload.clone(),
                    index: None,
                    issued_at: inf.issued_at,
                    done_at: now,
                });
                let gap = cl.gap_us;
                self.trace.push(TraceEvent::ClientDone {
                    at: now,
                    client: cl.id,
                    request_id,
                    status: s,
                    response: payload,
                });
                self.push_event(now + gap.max(1), Ev::ClientWake { client: c, attempt: 0 });
            }
            Next::Retry => {
                let backoff = self.cfg.client_retry_backoff_us;
                let cl = &mut self.clients[c];
                // invalidate the pending timeout wake and retry after backoff
                cl.attempt_seq += 1;
                let attempt = cl.attempt_seq;
                if let Some(inf) = cl.current.as_mut() {
                    inf.attempt = attempt;
                }
                self.push_event(now + backoff.max(1), Ev::ClientWake { client: c, attempt });
            }
        }
        Ok(())
    }

    // ---- faults ----

    fn apply_fault(&mut self, f: FaultEvent) -> Result<()> {
        match f {
            FaultEvent::KillLeader => {
                if let Some(leader) = self.current_leader.take() {
                    return self.apply_fault(FaultEvent::Kill { node: leader });
                }
            }
            FaultEvent::Kill { node } => {
                let i = node as usize;
                if let Some(rep) = self.nodes[i].take() {
                    self.killed_images[i] = Some(rep.arena.simulate_crash());
                    self.node_epoch[i] += 1;
                    self.tick_scheduled_at[i] = u64::MAX;
                    self.trace.push(TraceEvent::NodeKilled { at: self.now, node });
                }
            }
            FaultEvent::Restart { node } => {
                let i = node as usize;
                if self.nodes[i].is_none() {
                    if let Some(img) = self.killed_images[i].take() {
                        let n = self.cfg.replicas;
                        let rcfg = ReplicaConfig {
                            raft: crate::logrep::RaftConfig {
                                id: node,
                                peers: (0..n).filter(|p| *p != node).collect(),
                                election_timeout_us: self.cfg.election_timeout_us,
                                heartbeat_us: self.cfg.heartbeat_us,
                                batch_cap: self.cfg.batch_cap,
                                log_capacity: self.cfg.log_capacity,
                                seed: self.cfg.seed ^ self.node_epoch[i],
                                force_copy: self.cfg.force_copy,
                            },
                            executors: self.cfg.executors,
                            arena_capacity: self.cfg.arena_capacity,
                            arena_mode: self.cfg.arena_mode,
                            force_copy: self.cfg.force_copy,
                            serial: self.cfg.serial,
                            ack_on_commit: self.cfg.ack_on_commit,
                        };
                        let rep = Replica::open_image(img, rcfg, (self.service_factory)())?;
                        self.nodes[i] = Some(rep);
                        self.trace.push(TraceEvent::NodeRestarted { at: self.now, node });
                        self.with_node(i, |rep, now| rep.start(now))?;
                    }
                }
            }
            FaultEvent::Partition { groups } => {
                let total = self.nodes.len() + self.clients.len();
                self.partition = vec![0; total];
                for (g, members) in groups.iter().enumerate() {
                    for m in members {
                        let idx = if *m >= CLIENT_BASE {
                            self.nodes.len() + (*m - CLIENT_BASE) as usize
                        } else {
                            *m as usize
                        };
                        if idx < total {
                            self.partition[idx] = g as u64 + 1;
                        }
                    }
                }
            }
            FaultEvent::Heal => {
                self.partition = vec![0; self.nodes.len() + self.clients.len()];
            }
            FaultEvent::SetDropRate { rate } => {
                self.drop_rate = rate;
            }
        }
        Ok(())
    }
}
