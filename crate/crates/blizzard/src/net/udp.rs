//! Datagram transport: one UDP socket per node, wire messages as packets.
//!
//! This is the real-socket deployment mode for benchmarks and manual poking;
//! correctness suites run on the deterministic simulator instead. Packet
//! loss is tolerated the same way the simulator's drops are: heartbeats
//! retransmit, clients time out and retry.

use crate::error::{Error, Result};
use crate::logrep::wire::{self, Message, ReplyStatus, RequestKind};
use crate::net::client::{ClientPolicy, Status, Verdict};
use crate::net::config::ClusterConfig;
use crate::pheap::Arena;
use crate::runtime::{NodeOut, Replica, ReplicaConfig};
use crate::sched::{self, ExecOutcome, QItem};
use crate::service::Service;
use std::collections::HashMap;
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

const MAX_DATAGRAM: usize = 60 * 1024;

fn node_addrs(cfg: &ClusterConfig) -> Result<HashMap<u64, SocketAddr>> {
    let mut m = HashMap::new();
    for n in &cfg.nodes {
        let addr: SocketAddr = n
            .addr
            .parse()
            .map_err(|_| Error::ConfigInvalid(format!("bad address {}", n.addr)))?;
        m.insert(n.id, addr);
    }
    Ok(m)
}

fn replica_config(cfg: &ClusterConfig, id: u64) -> Result<ReplicaConfig> {
    Ok(ReplicaConfig {
        raft: crate::logrep::RaftConfig {
            id,
            peers: (0..cfg.replicas).filter(|p| *p != id).collect(),
            election_timeout_us: cfg.election_timeout_us,
            heartbeat_us: cfg.heartbeat_us,
            batch_cap: cfg.batch_cap,
            log_capacity: cfg.log_capacity,
            seed: cfg.seed,
            force_copy: false,
        },
        executors: cfg.executors,
        arena_capacity: cfg.arena_capacity,
        arena_mode: cfg.mode()?,
        force_copy: false,
        serial: false,
        ack_on_commit: false,
    })
}

/// Run one node over UDP until `stop` is raised. The heap file persists the
/// node's state across restarts; it is created on first start and recovered
/// afterwards.
pub fn run_node(
    cfg: &ClusterConfig,
    id: u64,
    service: Arc<dyn Service>,
    heap_path: &Path,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    let addrs = node_addrs(cfg)?;
    let my_addr = *addrs
        .get(&id)
        .ok_or_else(|| Error::ConfigInvalid(format!("node {id} not in config")))?;
    let rcfg = replica_config(cfg, id)?;
    let mut replica = if heap_path.exists() {
        let arena = Arc::new(Arena::open(heap_path, rcfg.arena_mode)?);
        Replica::open_on(arena, rcfg, service)?
    } else {
        let arena = Arc::new(Arena::create(heap_path, rcfg.arena_capacity, rcfg.arena_mode)?);
        Replica::create_on(arena, rcfg, service)?
    };

    let socket = UdpSocket::bind(my_addr)?;
    socket.set_read_timeout(Some(Duration::from_micros(1000)))?;
    let addr_of_node: HashMap<u64, SocketAddr> = addrs.clone();
    let node_of_addr: HashMap<SocketAddr, u64> =
        addrs.iter().map(|(id, a)| (*a, *id)).collect();

    // executor pool feeding completions back through a channel
    let (done_tx, done_rx) = mpsc::channel::<(QItem, ExecOutcome)>();
    let mut exec_txs = Vec::new();
    let mut exec_handles = Vec::new();
    for _ in 0..cfg.executors.max(1) {
        let (jtx, jrx) = mpsc::channel::<QItem>();
        let arena = replica.arena.clone();
        let mgr = replica.mgr.clone();
        let service = replica.service();
        let counters = replica.counters.clone();
        let dtx = done_tx.clone();
        exec_handles.push(std::thread::spawn(move || {
            while let Ok(item) = jrx.recv() {
                match sched::execute(&arena, &mgr, &*service, item.off(), &counters) {
                    Ok(outcome) => {
                        if dtx.send((item, outcome)).is_err() {
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
    // tokens route replies back to client socket addresses
    let mut client_addrs: HashMap<u64, SocketAddr> = HashMap::new();
    let mut next_token: u64 = 0;
    let mut rr = 0usize;
    let mut buf = vec![0u8; MAX_DATAGRAM];

    let route = |outs: Vec<NodeOut>,
                     socket: &UdpSocket,
                     client_addrs: &mut HashMap<u64, SocketAddr>,
                     rr: &mut usize| {
        for out in outs {
            match out {
                NodeOut::Send { to, bytes } => {
                    if let Some(a) = addr_of_node.get(&to) {
                        let _ = socket.send_to(&bytes, a);
                    }
                }
                NodeOut::Reply { token, msg } => {
                    if let Some(a) = client_addrs.remove(&token) {
                        let _ = socket.send_to(&wire::encode(&msg), a);
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
    };

    let outs = replica.start(started.elapsed().as_micros() as u64)?;
    route(outs, &socket, &mut client_addrs, &mut rr);

    while !stop.load(Ordering::Relaxed) {
        let now = started.elapsed().as_micros() as u64;
        let mut outs = Vec::new();
        match socket.recv_from(&mut buf) {
            Ok((len, src)) => {
                let bytes = &buf[..len];
                match wire::decode(bytes) {
                    Ok(Message::ClientRequest {
                        kind,
                        client_id,
                        request_id,
                        payload,
                    }) => {
                        next_token += 1;
                        client_addrs.insert(next_token, src);
                        outs.extend(replica.on_client(
                            next_token, kind, client_id, request_id, &payload, now,
                        )?);
                    }
                    Ok(_) => {
                        if let Some(peer) = node_of_addr.get(&src) {
                            outs.extend(replica.on_peer(*peer, bytes, now)?);
                        }
                    }
                    Err(_) => {}
                }
            }
            Err(ref e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => return Err(e.into()),
        }
        while let Ok((item, outcome)) = done_rx.try_recv() {
            outs.extend(replica.on_exec_done(item, outcome, now)?);
        }
        outs.extend(replica.flush_now()?);
        outs.extend(replica.on_tick(now)?);
        route(outs, &socket, &mut client_addrs, &mut rr);
    }

    drop(exec_txs);
    for h in exec_handles {
        let _ = h.join();
    }
    replica.arena.persist_to_file()?;
    Ok(())
}

/// Blocking UDP client with the shared discovery/retry policy.
pub struct UdpClient {
    socket: UdpSocket,
    addrs: HashMap<u64, SocketAddr>,
    policy: ClientPolicy,
    attempts: u32,
    client_id: u64,
    next_rid: u64,
    timeout: Duration,
}

impl UdpClient {
    pub fn connect(cfg: &ClusterConfig, client_id: u64, timeout: Duration) -> Result<UdpClient> {
        let addrs = node_addrs(cfg)?;
        let socket = UdpSocket::bind("127.0.0.1:0")?;
        socket.set_read_timeout(Some(timeout))?;
        let ids: Vec<u64> = (0..cfg.replicas).collect();
        Ok(UdpClient {
            socket,
            addrs,
            policy: ClientPolicy::new(ids, cfg.client_attempts),
            attempts: cfg.client_attempts,
            client_id,
            next_rid: 0,
            timeout,
        })
    }

    pub fn update(&mut self, payload: &[u8]) -> (Status, Vec<u8>) {
        self.call(RequestKind::Update, payload)
    }

    pub fn read(&mut self, payload: &[u8]) -> (Status, Vec<u8>) {
        self.call(RequestKind::Read, payload)
    }

    fn call(&mut self, kind: RequestKind, payload: &[u8]) -> (Status, Vec<u8>) {
        self.next_rid += 1;
        let rid = self.next_rid;
        self.policy.reset_attempts(self.attempts);
        let mut buf = vec![0u8; MAX_DATAGRAM];
        loop {
            let Some(target) = self.policy.next_target() else {
                return (Status::NoLeader, vec![]);
            };
            let Some(addr) = self.addrs.get(&target) else {
                self.policy.on_timeout(target);
                continue;
            };
            let msg = wire::encode(&Message::ClientRequest {
                kind,
                client_id: self.client_id,
                request_id: rid,
                payload: payload.to_vec(),
            });
            if self.socket.send_to(&msg, addr).is_err() {
                self.policy.on_timeout(target);
                continue;
            }
            let deadline = Instant::now() + self.timeout;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    self.policy.on_timeout(target);
                    break;
                }
                let _ = self.socket.set_read_timeout(Some(left));
                match self.socket.recv_from(&mut buf) {
                    Ok((len, _)) => match wire::decode(&buf[..len]) {
                        Ok(Message::ClientReply {
                            status,
                            leader_hint,
                            request_id,
                            payload: body,
                        }) if request_id == rid => {
                            match self.policy.on_reply(target, status, leader_hint) {
                                Verdict::Done(s) => return (s, body),
                                Verdict::Retry => {
                                    let pause = match status {
                                        ReplyStatus::Busy => Duration::from_micros(500),
                                        ReplyStatus::NotLeader
                                            if leader_hint == wire::NO_HINT =>
                                        {
                                            Duration::from_millis(5)
                                        }
                                        _ => Duration::from_millis(1),
                                    };
                                    std::thread::sleep(pause);
                                    break;
                                }
                            }
                        }
                        _ => continue, // stale or foreign packet
                    },
                    Err(_) => {
                        self.policy.on_timeout(target);
                        break;
                    }
                }
            }
        }
    }
}
